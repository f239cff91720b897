#pragma once

// Configuration files. Both the tool config and the label-space file use a
// TOML subset: [dotted.section] headers, `key = value` pairs with bare or
// quoted keys, strings, numbers, booleans, and (possibly multi-line) arrays.
// Sections and keys keep file order.

#include "lidarmerge/core.hpp"
#include "lidarmerge/dataspace.hpp"
#include "lidarmerge/labelspace.hpp"
#include "lidarmerge/losses.hpp"
#include "lidarmerge/panoptic.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <variant>

namespace lidarmerge::config {

struct Value;
using Array = std::vector<Value>;

struct Value {
  std::variant<bool, double, std::string, Array> data;
  std::size_t line = 0;

  bool is_string() const { return std::holds_alternative<std::string>(data); }
  bool is_number() const { return std::holds_alternative<double>(data); }
  bool is_bool() const { return std::holds_alternative<bool>(data); }
  bool is_array() const { return std::holds_alternative<Array>(data); }
};

struct Table {
  std::string name;
  std::size_t line = 0;
  std::vector<std::pair<std::string, Value>> entries;

  const Value* find(std::string_view key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return &v;
    return nullptr;
  }
};

struct Document {
  std::string source;
  std::vector<Table> tables;  // tables[0] holds top-level keys (name "")

  const Table* find(std::string_view name) const {
    for (const auto& t : tables)
      if (t.name == name) return &t;
    return nullptr;
  }
};

[[noreturn]] inline void fail(const std::string& source, std::size_t line, const std::string& msg) {
  throw Error(ErrorKind::config, "config", source + ":" + std::to_string(line) + ": " + msg);
}

namespace detail {

class Parser {
 public:
  Parser(std::string_view text, std::string source) : text_(text), source_(std::move(source)) {}

  Document parse() {
    Document doc;
    doc.source = source_;
    doc.tables.push_back(Table{"", 1, {}});
    while (true) {
      skip_ws_and_comments(true);
      if (eof()) break;
      if (peek() == '[') {
        ++pos_;
        std::string name;
        while (true) {
          skip_inline_ws();
          name += parse_key();
          skip_inline_ws();
          if (peek() == '.') {
            ++pos_;
            name += '.';
            continue;
          }
          break;
        }
        expect(']');
        for (const auto& t : doc.tables) {
          if (t.name == name) error("duplicate section [" + name + "]");
        }
        doc.tables.push_back(Table{name, line_, {}});
      } else {
        const std::size_t key_line = line_;
        std::string key = parse_key();
        skip_inline_ws();
        expect('=');
        skip_inline_ws();
        Value v = parse_value();
        auto& table = doc.tables.back();
        if (table.find(key)) error("duplicate key '" + key + "'");
        v.line = key_line;
        table.entries.emplace_back(std::move(key), std::move(v));
      }
      end_of_line();
    }
    return doc;
  }

 private:
  bool eof() const { return pos_ >= text_.size(); }
  char peek() const { return eof() ? '\0' : text_[pos_]; }
  [[noreturn]] void error(const std::string& msg) const { fail(source_, line_, msg); }

  void expect(char c) {
    if (peek() != c) error(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_inline_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) ++pos_;
  }

  void skip_ws_and_comments(bool newlines) {
    while (!eof()) {
      const char c = peek();
      if (c == ' ' || c == '\t' || c == '\r') {
        ++pos_;
      } else if (c == '\n' && newlines) {
        ++pos_;
        ++line_;
      } else if (c == '#') {
        while (!eof() && peek() != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  void end_of_line() {
    skip_inline_ws();
    if (peek() == '#') {
      while (!eof() && peek() != '\n') ++pos_;
    }
    if (eof()) return;
    if (peek() != '\n') error("unexpected trailing characters");
  }

  std::string parse_key() {
    if (peek() == '"') return parse_string();
    std::string key;
    while (!eof()) {
      const char c = peek();
      if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') {
        key += c;
        ++pos_;
      } else {
        break;
      }
    }
    if (key.empty()) error("expected a key");
    return key;
  }

  std::string parse_string() {
    expect('"');
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') error("unterminated string");
      char c = text_[pos_++];
      if (c == '"') break;
      if (c == '\\') {
        if (eof()) error("unterminated escape");
        const char e = text_[pos_++];
        switch (e) {
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          default: error(std::string("unsupported escape \\") + e);
        }
      } else {
        out += c;
      }
    }
    return out;
  }

  Value parse_value() {
    Value v;
    v.line = line_;
    const char c = peek();
    if (c == '"') {
      v.data = parse_string();
    } else if (c == '[') {
      ++pos_;
      Array arr;
      while (true) {
        skip_ws_and_comments(true);
        if (peek() == ']') {
          ++pos_;
          break;
        }
        arr.push_back(parse_value());
        skip_ws_and_comments(true);
        if (peek() == ',') {
          ++pos_;
        } else if (peek() == ']') {
          ++pos_;
          break;
        } else {
          error("expected ',' or ']' in array");
        }
      }
      v.data = std::move(arr);
    } else if (text_.substr(pos_, 4) == "true") {
      pos_ += 4;
      v.data = true;
    } else if (text_.substr(pos_, 5) == "false") {
      pos_ += 5;
      v.data = false;
    } else {
      const std::size_t start = pos_;
      while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '.' || peek() == '-' ||
                        peek() == '+' || peek() == '_')) {
        ++pos_;
      }
      std::string tok(text_.substr(start, pos_ - start));
      std::erase(tok, '_');
      if (!tok.empty() && tok.front() == '+') tok.erase(0, 1);
      double d = 0.0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), d);
      if (tok.empty() || ec != std::errc{} || ptr != tok.data() + tok.size()) error("invalid value '" + tok + "'");
      v.data = d;
    }
    return v;
  }

  std::string_view text_;
  std::string source_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

}  // namespace detail

inline Document parse_document(std::string_view text, std::string source = "<config>") {
  return detail::Parser(text, std::move(source)).parse();
}

inline Document load_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "config", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_document(ss.str(), path);
}

// Typed accessors; all report file and line on mismatch.

inline double as_number(const Document& doc, const Value& v, std::string_view key) {
  if (!v.is_number()) fail(doc.source, v.line, "'" + std::string(key) + "' must be a number");
  return std::get<double>(v.data);
}

inline std::size_t as_count(const Document& doc, const Value& v, std::string_view key) {
  const double d = as_number(doc, v, key);
  if (d < 0 || d != std::floor(d)) fail(doc.source, v.line, "'" + std::string(key) + "' must be a non-negative integer");
  return static_cast<std::size_t>(d);
}

inline bool as_bool(const Document& doc, const Value& v, std::string_view key) {
  if (!v.is_bool()) fail(doc.source, v.line, "'" + std::string(key) + "' must be true or false");
  return std::get<bool>(v.data);
}

inline const std::string& as_string(const Document& doc, const Value& v, std::string_view key) {
  if (!v.is_string()) fail(doc.source, v.line, "'" + std::string(key) + "' must be a string");
  return std::get<std::string>(v.data);
}

inline std::vector<std::string> as_strings(const Document& doc, const Value& v, std::string_view key) {
  if (!v.is_array()) fail(doc.source, v.line, "'" + std::string(key) + "' must be an array of strings");
  std::vector<std::string> out;
  for (const auto& e : std::get<Array>(v.data)) out.push_back(as_string(doc, e, key));
  return out;
}

inline Vec3 as_vec3(const Document& doc, const Value& v, std::string_view key) {
  if (v.is_number()) return Vec3::Constant(std::get<double>(v.data));
  if (!v.is_array() || std::get<Array>(v.data).size() != 3) {
    fail(doc.source, v.line, "'" + std::string(key) + "' must be a number or a 3-element array");
  }
  const auto& a = std::get<Array>(v.data);
  return Vec3(as_number(doc, a[0], key), as_number(doc, a[1], key), as_number(doc, a[2], key));
}

inline void reject_unknown(const Document& doc, const Table& t, std::initializer_list<std::string_view> allowed) {
  for (const auto& [k, v] : t.entries) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      fail(doc.source, v.line, "unknown key '" + k + "' in [" + t.name + "]");
    }
  }
}

/// Parameters shared by every CLI subcommand.
struct ToolConfig {
  std::string source;
  std::map<std::string, dataspace::DatasetProfile> datasets;
  std::vector<std::string> dataset_order;
  std::optional<std::string> label_space_path;
  losses::ContrastiveOptions contrastive{};
  double norm_epsilon = dataspace::kDefaultNormEpsilon;
  dataspace::NormMode norm_mode = dataspace::NormMode::running;
  ClassId ignore_id = kDefaultIgnoreId;
  panoptic::InstanceConfig cluster{};
  double histogram_bin_width = dataspace::kDefaultHistogramBinWidth;
  double histogram_max_range = dataspace::kDefaultHistogramMaxRange;

  const dataspace::DatasetProfile& profile(const std::string& id) const {
    auto it = datasets.find(id);
    if (it == datasets.end()) throw Error(ErrorKind::unknown_dataset, "config", "no profile for dataset '" + id + "'");
    return it->second;
  }
};

inline std::string prefix_after(std::string_view name, std::string_view prefix) {
  return std::string(name.substr(prefix.size()));
}

inline ToolConfig parse_tool_config(const Document& doc, const std::filesystem::path& base_dir = {}) {
  ToolConfig cfg;
  cfg.source = doc.source;
  for (const auto& t : doc.tables) {
    if (t.name.empty()) {
      reject_unknown(doc, t, {"label_space"});
      if (const auto* v = t.find("label_space")) {
        std::filesystem::path p = as_string(doc, *v, "label_space");
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        if (!std::filesystem::exists(p)) fail(doc.source, v->line, "label space file '" + p.string() + "' does not exist");
        cfg.label_space_path = p.string();
      }
    } else if (t.name.starts_with("dataset.")) {
      reject_unknown(doc, t, {"voxel_size", "origin_offset", "bandwidth", "class_count"});
      dataspace::DatasetProfile prof;
      prof.dataset_id = prefix_after(t.name, "dataset.");
      if (const auto* v = t.find("voxel_size")) prof.voxel_size = as_vec3(doc, *v, "voxel_size");
      if (const auto* v = t.find("origin_offset")) prof.origin_offset = as_vec3(doc, *v, "origin_offset");
      if (const auto* v = t.find("bandwidth")) prof.bandwidth = as_number(doc, *v, "bandwidth");
      if (const auto* v = t.find("class_count")) prof.class_count = as_count(doc, *v, "class_count");
      try {
        prof.validate();
      } catch (const Error& e) {
        fail(doc.source, t.line, e.what());
      }
      cfg.dataset_order.push_back(prof.dataset_id);
      cfg.datasets[prof.dataset_id] = prof;
    } else if (t.name == "loss") {
      reject_unknown(doc, t, {"tau", "normalize_embeddings", "epsilon", "norm_mode"});
      if (const auto* v = t.find("tau")) cfg.contrastive.tau = as_number(doc, *v, "tau");
      if (const auto* v = t.find("normalize_embeddings")) {
        cfg.contrastive.normalize_embeddings = as_bool(doc, *v, "normalize_embeddings");
      }
      if (const auto* v = t.find("epsilon")) cfg.norm_epsilon = as_number(doc, *v, "epsilon");
      if (const auto* v = t.find("norm_mode")) {
        const auto& m = as_string(doc, *v, "norm_mode");
        if (m == "running") {
          cfg.norm_mode = dataspace::NormMode::running;
        } else if (m == "batch") {
          cfg.norm_mode = dataspace::NormMode::batch;
        } else {
          fail(doc.source, v->line, "norm_mode must be \"running\" or \"batch\"");
        }
      }
      if (!(cfg.contrastive.tau > 0.0)) fail(doc.source, t.line, "tau must be positive");
    } else if (t.name == "eval") {
      reject_unknown(doc, t, {"ignore_id"});
      if (const auto* v = t.find("ignore_id")) cfg.ignore_id = static_cast<ClassId>(as_count(doc, *v, "ignore_id"));
    } else if (t.name == "cluster") {
      reject_unknown(doc, t, {"max_iterations", "shift_tolerance", "mode_merge_radius", "min_cluster_size"});
      if (const auto* v = t.find("max_iterations")) {
        cfg.cluster.max_iterations = static_cast<int>(as_count(doc, *v, "max_iterations"));
      }
      if (const auto* v = t.find("shift_tolerance")) cfg.cluster.shift_tolerance = as_number(doc, *v, "shift_tolerance");
      if (const auto* v = t.find("mode_merge_radius")) {
        cfg.cluster.mode_merge_radius = as_number(doc, *v, "mode_merge_radius");
      }
      if (const auto* v = t.find("min_cluster_size")) cfg.cluster.min_cluster_size = as_count(doc, *v, "min_cluster_size");
    } else if (t.name == "stats") {
      reject_unknown(doc, t, {"bin_width", "max_range"});
      if (const auto* v = t.find("bin_width")) cfg.histogram_bin_width = as_number(doc, *v, "bin_width");
      if (const auto* v = t.find("max_range")) cfg.histogram_max_range = as_number(doc, *v, "max_range");
    } else {
      fail(doc.source, t.line, "unknown section [" + t.name + "]");
    }
  }
  return cfg;
}

inline ToolConfig load_tool_config(const std::string& path) {
  return parse_tool_config(load_document(path), std::filesystem::path(path).parent_path());
}

struct LabelSpaceConfig {
  labelspace::LabelSpace space;
  labelspace::PromptRegistry prompts;
  std::vector<labelspace::SynonymGroup> synonyms;
};

/// Label-space file: [dataset.<id>] with `classes`, optional `things` and
/// `ignore_id`; [synonyms] mapping a unified name to "dataset:class"
/// members; [templates] `items`; [prompts.<id>] mapping class names to
/// prompt lists.
inline LabelSpaceConfig parse_label_space(const Document& doc) {
  std::vector<labelspace::DatasetClasses> datasets;
  std::vector<labelspace::SynonymGroup> synonyms;
  std::vector<std::string> templates;
  std::map<std::string, labelspace::DatasetPromptTable> prompts;
  for (const auto& t : doc.tables) {
    if (t.name.empty()) {
      reject_unknown(doc, t, {});
    } else if (t.name.starts_with("dataset.")) {
      reject_unknown(doc, t, {"classes", "things", "ignore_id"});
      labelspace::DatasetClasses d;
      d.dataset_id = prefix_after(t.name, "dataset.");
      const auto* classes = t.find("classes");
      if (!classes) fail(doc.source, t.line, "[" + t.name + "] needs 'classes'");
      d.classes = as_strings(doc, *classes, "classes");
      if (const auto* v = t.find("things")) {
        for (auto& s : as_strings(doc, *v, "things")) d.things.insert(std::move(s));
      }
      if (const auto* v = t.find("ignore_id")) d.ignore_id = static_cast<ClassId>(as_count(doc, *v, "ignore_id"));
      datasets.push_back(std::move(d));
    } else if (t.name == "synonyms") {
      for (const auto& [name, v] : t.entries) {
        labelspace::SynonymGroup g;
        g.unified_name = name;
        for (const auto& ref : as_strings(doc, v, name)) {
          const auto colon = ref.find(':');
          if (colon == std::string::npos) fail(doc.source, v.line, "synonym member '" + ref + "' must be dataset:class");
          g.members.push_back({ref.substr(0, colon), ref.substr(colon + 1)});
        }
        synonyms.push_back(std::move(g));
      }
    } else if (t.name == "templates") {
      reject_unknown(doc, t, {"items"});
      if (const auto* v = t.find("items")) templates = as_strings(doc, *v, "items");
    } else if (t.name.starts_with("prompts.")) {
      auto& table = prompts[prefix_after(t.name, "prompts.")];
      for (const auto& [name, v] : t.entries) table[name] = as_strings(doc, v, name);
    } else {
      fail(doc.source, t.line, "unknown section [" + t.name + "]");
    }
  }
  LabelSpaceConfig out{labelspace::build_unified_space(std::move(datasets), synonyms), {}, synonyms};
  out.prompts = labelspace::build_prompt_registry(out.space, prompts, std::move(templates));
  return out;
}

inline LabelSpaceConfig load_label_space(const std::string& path) { return parse_label_space(load_document(path)); }

}  // namespace lidarmerge::config
