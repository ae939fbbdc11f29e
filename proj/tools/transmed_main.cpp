#include <iostream>

#include "transmed/cli.hpp"

int main(int argc, char** argv) { return transmed::cli::run(argc, argv, std::cout, std::cerr); }
