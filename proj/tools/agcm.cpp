#include "agcm/cli.hpp"

int main(int argc, char** argv) { return agcm::cli::main(argc, argv); }
