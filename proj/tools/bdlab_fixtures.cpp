// Writes the golden interchange fixtures into a directory.
//
//   bdlab_fixtures tests/fixtures

#include <filesystem>
#include <iostream>

#include "bdlab/golden.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: bdlab_fixtures <dir>\n";
    return 2;
  }
  const std::filesystem::path dir = argv[1];
  for (const auto& [name, bytes] : bdlab::golden::files()) {
    bdlab::write_file(dir / name, bytes);
    std::cout << name << " " << bdlab::sha256_hex(bytes) << "\n";
  }
  return 0;
}
