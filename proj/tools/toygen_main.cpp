// toygen — writes the synthetic two-voice corpus used by the training and
// conversion experiments: <dir>/<speaker>/<utt>.wav plus a split.txt that
// marks every speaker as training material.

#include "dvae/blas_env.hpp"

#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "dvae/synth.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic harmonic-voice corpus generator"};
  std::string out;
  int speakers = 2;
  int utts = 10;
  double seconds = 3.0;
  app.add_option("--out", out, "Corpus output directory")->required();
  app.add_option("--speakers", speakers, "Number of voices (default 2)");
  app.add_option("--utts", utts, "Utterances per voice (default 10)");
  app.add_option("--seconds", seconds, "Utterance length (default 3.0)");

  try {
    app.parse(argc, argv);
    std::string split = dvae::write_toy_corpus(out, speakers, utts, seconds);
    std::printf("toygen: %d speakers x %d utterances under %s (split %s)\n",
                speakers, utts, out.c_str(), split.c_str());
    return 0;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
