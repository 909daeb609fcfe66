#include "cli.hpp"

int main(int argc, char** argv) { return spatialgeo::cli::run(argc, argv); }
