#include "ensmooth/cli.hpp"

int main(int argc, char** argv) { return ensmooth::cli::run(argc, argv); }
