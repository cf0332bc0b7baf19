#include "ebridge/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return ebridge::cli::run(argc, argv, std::cout, std::cerr); }
