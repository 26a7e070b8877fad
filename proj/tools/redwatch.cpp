#include <iostream>

#include "redwatch/cli.hpp"

int main(int argc, char** argv) { return redwatch::cli::run(argc, argv, std::cout, std::cerr); }
