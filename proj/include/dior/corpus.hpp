#pragma once

// Dialog records, word-level vocabulary, context formatting, the external
// JSONL loader, and the synthetic one-to-many corpus.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dior {

/// Lowercases and splits on whitespace.
std::vector<std::string> tokenize(const std::string& text);

class Vocab {
 public:
  Vocab();

  int add(const std::string& token);
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  /// Unknown tokens map to the UNK id.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  /// `unknown`, when given, receives the number of out-of-vocabulary words.
  std::vector<int> encode(const std::string& text, int* unknown = nullptr) const;
  /// Joins tokens with single spaces; reserved ids other than UNK are skipped.
  std::string decode(std::span<const int> ids) const;

  /// One non-reserved token per line; line i holds id (reserved count + i).
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Text form of one dialog, as stored in corpus files.
struct DialogRecord {
  std::vector<std::string> context;
  std::string response;
  std::vector<std::string> references;
};

/// Token form. Context utterance i is spoken by speaker A when i is even.
struct DialogExample {
  std::vector<std::vector<int>> context;
  std::vector<int> response;
  std::vector<std::vector<int>> references;
};

void validate(const DialogExample& example);

DialogExample to_example(const DialogRecord& record, const Vocab& vocab);
std::vector<DialogExample> to_examples(std::span<const DialogRecord> records, const Vocab& vocab);
/// Adds every token of every record, in order of first appearance.
void extend_vocab(Vocab& vocab, std::span<const DialogRecord> records);

struct FormattedContext {
  std::vector<int> ids;
  bool truncated = false;
};

/// [SPK][utt1][SEP][SPK][utt2]... keeping the newest max_len tokens.
FormattedContext format_context(const DialogExample& example, int max_len);

/// Line-delimited JSON: {"context": [...], "response": "...", "references": [...]}.
std::vector<DialogRecord> load_records(const std::filesystem::path& path);
void save_records(const std::filesystem::path& path, std::span<const DialogRecord> records);
std::string to_json_line(const DialogRecord& record);

struct SynthCorpus {
  std::vector<DialogRecord> train;  // one uniformly drawn reference per context
  std::vector<DialogRecord> eval;   // every reference kept
};

struct SynthOptions {
  std::uint64_t seed = 1234;
  int contexts = 600;
  int refs_per_context = 5;
  double eval_fraction = 1.0 / 6.0;
};

/// Template contexts whose valid responses come from disjoint answer families.
SynthCorpus synth_corpus(const SynthOptions& options);

/// |A n B| / |A u B| over token sets.
double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b);

}  // namespace dior
