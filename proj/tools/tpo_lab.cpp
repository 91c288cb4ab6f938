#include <iostream>

#include "tpo/cli.hpp"

int main(int argc, char** argv) { return tpo::cli::dispatch(argc, argv, std::cout, std::cerr); }
