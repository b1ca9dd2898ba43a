#include "cli.hpp"

int main(int argc, char** argv) { return kdxcli::run(argc, argv); }
