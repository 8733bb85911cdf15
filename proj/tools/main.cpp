#include <iostream>

#include "eccdet/cli.hpp"

int main(int argc, char** argv) { return eccdet::cli::run(argc, argv, std::cout, std::cerr); }
