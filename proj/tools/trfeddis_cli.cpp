#include <iostream>

#include "trfeddis/cli.hpp"

int main(int argc, char** argv) { return trfeddis::cli::cli_main(argc, argv, std::cout, std::cerr); }
