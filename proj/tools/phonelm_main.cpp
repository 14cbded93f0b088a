#include "phonelm/cli.hpp"

int main(int argc, char** argv) { return phonelm::cli::run(argc, argv); }
