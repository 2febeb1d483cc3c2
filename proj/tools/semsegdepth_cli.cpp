#include "semsegdepth/cli.hpp"

int main(int argc, char** argv) { return semsegdepth::cli::run(argc, argv); }
