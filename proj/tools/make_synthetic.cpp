// Writes a Beauty-format interaction CSV, or the 50-user memorization fixture.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mabsrec/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"synthetic Beauty-format data"};
  mabsrec::synthetic::SyntheticSpec spec;
  std::string out = "synthetic.csv";
  bool memorization = false;
  app.add_option("--out", out, "output CSV path");
  app.add_option("--users", spec.users);
  app.add_option("--items", spec.items);
  app.add_option("--categories", spec.categories);
  app.add_option("--min-len", spec.min_len);
  app.add_option("--max-len", spec.max_len);
  app.add_option("--zipf", spec.zipf);
  app.add_option("--transition-prob", spec.transition_prob);
  app.add_option("--preference-prob", spec.preference_prob);
  app.add_option("--seed", spec.seed);
  app.add_flag("--memorization", memorization, "write the 50-user, 30-item memorization fixture instead");
  CLI11_PARSE(app, argc, argv);

  try {
    const std::string text = memorization ? mabsrec::synthetic::memorization_csv() : mabsrec::synthetic::beauty_format_csv(spec);
    std::ofstream file(out, std::ios::binary);
    if (!file) throw std::runtime_error("cannot write '" + out + "'");
    file << text;
  } catch (const std::exception& e) {
    std::cerr << "{\"error\":\"synthetic\",\"message\":\"" << e.what() << "\"}\n";
    return 1;
  }
  std::cout << "wrote " << out << '\n';
  return 0;
}
