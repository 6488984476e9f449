#include "dior/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dior/rng.hpp"
#include "dior/tokens.hpp"

namespace dior {

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(word));
  }
  return out;
}

// ---- Vocab ----------------------------------------------------------------

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<s>", "</s>", "[sep]", "<spk_a>", "<spk_b>", "<unk>"}) add(t);
}

int Vocab::add(const std::string& token) {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? tokens::kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text, int* unknown) const {
  std::vector<int> ids;
  int missing = 0;
  for (const auto& w : tokenize(text)) {
    const int i = id(w);
    if (i == tokens::kUnk && w != "<unk>") ++missing;
    ids.push_back(i);
  }
  if (unknown) *unknown = missing;
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i < tokens::kReservedCount && i != tokens::kUnk) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
  for (std::size_t i = tokens::kReservedCount; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary file " + path.string());
  Vocab v;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": empty token");
    if (v.contains(line)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": duplicate token '" + line + "'");
    }
    v.add(line);
  }
  return v;
}

// ---- examples -------------------------------------------------------------

void validate(const DialogExample& example) {
  if (example.context.empty()) throw std::invalid_argument("dialog example has no context utterance");
}

DialogExample to_example(const DialogRecord& record, const Vocab& vocab) {
  DialogExample ex;
  for (const auto& utt : record.context) ex.context.push_back(vocab.encode(utt));
  ex.response = vocab.encode(record.response);
  for (const auto& ref : record.references) ex.references.push_back(vocab.encode(ref));
  return ex;
}

std::vector<DialogExample> to_examples(std::span<const DialogRecord> records, const Vocab& vocab) {
  std::vector<DialogExample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(to_example(r, vocab));
  return out;
}

void extend_vocab(Vocab& vocab, std::span<const DialogRecord> records) {
  auto add_all = [&](const std::string& text) {
    for (const auto& w : tokenize(text)) vocab.add(w);
  };
  for (const auto& r : records) {
    for (const auto& u : r.context) add_all(u);
    add_all(r.response);
    for (const auto& ref : r.references) add_all(ref);
  }
}

FormattedContext format_context(const DialogExample& example, int max_len) {
  validate(example);
  if (max_len < 1) throw std::invalid_argument("format_context: max_len must be >= 1");
  FormattedContext out;
  for (std::size_t i = 0; i < example.context.size(); ++i) {
    if (i > 0) out.ids.push_back(tokens::kSep);
    out.ids.push_back(i % 2 == 0 ? tokens::kSpeakerA : tokens::kSpeakerB);
    for (int id : example.context[i]) {
      if (id != tokens::kPad) out.ids.push_back(id);
    }
  }
  if (static_cast<int>(out.ids.size()) > max_len) {
    out.ids.erase(out.ids.begin(), out.ids.end() - max_len);
    out.truncated = true;
  }
  return out;
}

// ---- JSONL ----------------------------------------------------------------

std::string to_json_line(const DialogRecord& record) {
  nlohmann::ordered_json j;
  j["context"] = record.context;
  j["response"] = record.response;
  if (!record.references.empty()) j["references"] = record.references;
  return j.dump();
}

std::vector<DialogRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus file " + path.string());
  std::vector<DialogRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    auto fail = [&](const std::string& why) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("malformed JSON (") + e.what() + ")");
    }
    if (!j.is_object()) fail("record is not an object");
    DialogRecord r;
    if (!j.contains("context") || !j["context"].is_array() || j["context"].empty()) {
      fail("field 'context' must be a non-empty list of strings");
    }
    for (const auto& u : j["context"]) {
      if (!u.is_string()) fail("field 'context' must contain strings");
      r.context.push_back(u.get<std::string>());
    }
    if (!j.contains("response") || !j["response"].is_string()) fail("field 'response' must be a string");
    r.response = j["response"].get<std::string>();
    if (j.contains("references")) {
      if (!j["references"].is_array()) fail("field 'references' must be a list of strings");
      for (const auto& ref : j["references"]) {
        if (!ref.is_string()) fail("field 'references' must contain strings");
        r.references.push_back(ref.get<std::string>());
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

void save_records(const std::filesystem::path& path, std::span<const DialogRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

// ---- synthetic corpus -----------------------------------------------------

double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::size_t shared = 0;
  for (const auto& w : sa) shared += sb.count(w);
  const std::size_t united = sa.size() + sb.size() - shared;
  return united == 0 ? 1.0 : static_cast<double>(shared) / static_cast<double>(united);
}

namespace {

struct Frame {
  std::vector<std::string> questions;
  std::vector<std::string> families;
};

const std::array<std::string, 24> kTopics = {
    "pizza", "movie", "weather", "job",   "trip",  "concert", "book",   "car",
    "garden", "game", "party",   "dog",   "coffee", "beach",  "park",   "museum",
    "bike",  "phone", "house",   "class", "song",  "dinner",  "team",   "market"};

const std::array<std::string, 4> kOpeners = {"hi there", "hello", "hey , good morning", "good evening"};
const std::array<std::string, 3> kReplies = {"hi , how are you ?", "hello , nice to see you",
                                             "oh hey , what is up ?"};

const std::vector<Frame>& frames() {
  static const std::vector<Frame> kFrames = {
      {{"what do you think about the {t} ?", "how do you like the {t} ?", "do you like the {t} ?"},
       {"i really love the {t} , it is wonderful", "honestly the {t} is pretty terrible",
        "i have never tried the {t} before", "my brother talks about the {t} all day",
        "it is fine but a bit expensive", "why do you ask me that ?", "let us change the subject please",
        "i think the {t} is better than last year"}},
      {{"shall we go for the {t} tomorrow ?", "are you free for the {t} this weekend ?",
        "want to join me for the {t} tonight ?"},
       {"sure , that sounds great to me", "sorry , i am busy tomorrow", "only if my sister can come too",
        "maybe , let me check my calendar first", "no thanks , i hate the {t}",
        "yes ! i will bring some snacks", "what time should we meet ?", "i would rather stay home and rest"}},
      {{"can you help me with the {t} ?", "could you tell me more about the {t} ?",
        "do you know anything about the {t} ?"},
       {"of course , what do you need ?", "i am not an expert on the {t}",
        "ask my friend , she knows a lot", "sure , the {t} is easy once you start",
        "not now , i am very tired", "there is a good guide online about it", "let me finish my work first",
        "why not ask the teacher instead ?"}},
  };
  return kFrames;
}

std::string fill(const std::string& pattern, const std::string& topic) {
  std::string out = pattern;
  for (auto pos = out.find("{t}"); pos != std::string::npos; pos = out.find("{t}")) {
    out.replace(pos, 3, topic);
  }
  return out;
}

}  // namespace

SynthCorpus synth_corpus(const SynthOptions& options) {
  if (options.refs_per_context < 2) throw std::invalid_argument("synth: refs_per_context must be >= 2");
  if (options.contexts < 1) throw std::invalid_argument("synth: contexts must be >= 1");
  if (!(options.eval_fraction >= 0.0 && options.eval_fraction < 1.0)) {
    throw std::invalid_argument("synth: eval_fraction must lie in [0, 1)");
  }
  const auto& fs = frames();
  for (const auto& f : fs) {
    if (options.refs_per_context > static_cast<int>(f.families.size())) {
      throw std::invalid_argument("synth: at most " + std::to_string(f.families.size()) +
                                  " references per context are available");
    }
  }

  // Every question phrasing admits a fixed subset of its frame's answer families.
  std::vector<std::vector<std::vector<int>>> admitted(fs.size());
  for (std::size_t f = 0; f < fs.size(); ++f) {
    for (std::size_t q = 0; q < fs[f].questions.size(); ++q) {
      std::vector<int> fam(fs[f].families.size());
      std::iota(fam.begin(), fam.end(), 0);
      Rng pick = make_rng(options.seed, 1000 + 16 * f + q);
      std::shuffle(fam.begin(), fam.end(), pick);
      fam.resize(static_cast<std::size_t>(options.refs_per_context));
      std::sort(fam.begin(), fam.end());
      admitted[f].push_back(std::move(fam));
    }
  }

  Rng rng = make_rng(options.seed, 7);
  std::set<std::string> seen;
  std::vector<DialogRecord> all;
  const std::size_t combos = [&] {
    std::size_t questions = 0;
    for (const auto& f : fs) questions += f.questions.size();
    return questions * kTopics.size() * (1 + kOpeners.size() + kOpeners.size() * kReplies.size());
  }();
  if (static_cast<std::size_t>(options.contexts) > combos) {
    throw std::invalid_argument("synth: at most " + std::to_string(combos) + " distinct contexts exist");
  }
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  while (static_cast<int>(all.size()) < options.contexts) {
    const std::size_t f = pick(fs.size());
    const std::size_t q = pick(fs[f].questions.size());
    const std::string& topic = kTopics[pick(kTopics.size())];
    const std::size_t turns = 1 + pick(3);
    DialogRecord r;
    if (turns >= 2) r.context.push_back(kOpeners[pick(kOpeners.size())]);
    if (turns == 3) r.context.push_back(kReplies[pick(kReplies.size())]);
    r.context.push_back(fill(fs[f].questions[q], topic));
    std::string key;
    for (const auto& u : r.context) key += u + "|";
    if (!seen.insert(key).second) continue;
    for (int fam : admitted[f][q]) r.references.push_back(fill(fs[f].families[static_cast<std::size_t>(fam)], topic));
    for (std::size_t i = 0; i < r.references.size(); ++i) {
      for (std::size_t j = i + 1; j < r.references.size(); ++j) {
        if (jaccard(tokenize(r.references[i]), tokenize(r.references[j])) >= 0.5) {
          throw std::logic_error("synth: references '" + r.references[i] + "' and '" + r.references[j] +
                                 "' are too similar");
        }
      }
    }
    all.push_back(std::move(r));
  }

  const auto eval_count = static_cast<std::size_t>(std::lround(options.eval_fraction * options.contexts));
  SynthCorpus out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    DialogRecord r = std::move(all[i]);
    if (i < eval_count) {
      r.response = r.references.front();
      out.eval.push_back(std::move(r));
    } else {
      r.response = r.references[pick(r.references.size())];
      r.references.clear();
      out.train.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace dior
