#include "cactusnet/experiment.hpp"

int main(int argc, char** argv) { return cnl::cli::run(argc, argv); }
