#include "mtst/records.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "mtst/error.hpp"

namespace mtst {

using nlohmann::json;

namespace {

constexpr std::pair<Provenance, std::string_view> kProvenanceNames[] = {
    {Provenance::set, "set"},           {Provenance::category, "category"}, {Provenance::label, "label"},
    {Provenance::external, "external"}, {Provenance::oracle, "oracle"},     {Provenance::model, "model"},
};

std::string required_string(const json& row, const char* key) {
  auto it = row.find(key);
  if (it == row.end()) throw std::invalid_argument(std::string("missing field '") + key + "'");
  if (!it->is_string()) throw std::invalid_argument(std::string("field '") + key + "' is not a string");
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& row, const char* key) {
  auto it = row.find(key);
  if (it == row.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw std::invalid_argument(std::string("field '") + key + "' is not a string");
  return it->get<std::string>();
}

void normalize_labels(std::vector<std::string>& labels) {
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
}

}  // namespace

std::string_view to_string(Provenance p) {
  for (const auto& [value, name] : kProvenanceNames)
    if (value == p) return name;
  return "unknown";
}

std::optional<Provenance> parse_provenance(std::string_view text) {
  for (const auto& [value, name] : kProvenanceNames)
    if (name == text) return value;
  return std::nullopt;
}

ImageRecord make_image(std::string id, std::vector<std::string> labels, std::optional<std::string> set_id,
                       std::optional<std::string> category) {
  normalize_labels(labels);
  return ImageRecord{std::move(id), std::move(set_id), std::move(labels), std::move(category)};
}

void for_each_jsonl(const std::filesystem::path& path, const std::function<void(const json&, std::size_t)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row = json::parse(line, nullptr, false);
    if (row.is_discarded()) throw ParseError(path.string(), line_no, "invalid JSON");
    if (!row.is_object()) throw ParseError(path.string(), line_no, "expected a JSON object");
    fn(row, line_no);
  }
}

void write_jsonl(const std::filesystem::path& path, std::span<const json> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& row : rows) out << row.dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

json to_json(const ImageRecord& record) {
  json row{{"id", record.id}};
  if (record.set_id) row["set_id"] = *record.set_id;
  if (record.category) row["category"] = *record.category;
  if (!record.labels.empty()) row["labels"] = record.labels;
  return row;
}

std::vector<ImageRecord> load_corpus(const std::filesystem::path& path) {
  std::vector<ImageRecord> corpus;
  std::unordered_set<std::string> seen;
  for_each_jsonl(path, [&](const json& row, std::size_t line) {
    try {
      ImageRecord rec;
      rec.id = required_string(row, "id");
      rec.set_id = optional_string(row, "set_id");
      rec.category = optional_string(row, "category");
      if (auto it = row.find("labels"); it != row.end() && !it->is_null()) {
        if (!it->is_array()) throw std::invalid_argument("field 'labels' is not an array");
        for (const auto& l : *it) {
          if (!l.is_string()) throw std::invalid_argument("field 'labels' holds a non-string");
          rec.labels.push_back(l.get<std::string>());
        }
      }
      normalize_labels(rec.labels);
      if (!seen.insert(rec.id).second) throw std::invalid_argument("duplicate image id '" + rec.id + "'");
      corpus.push_back(std::move(rec));
    } catch (const std::invalid_argument& e) {
      throw ParseError(path.string(), line, e.what());
    }
  });
  return corpus;
}

void save_corpus(const std::filesystem::path& path, std::span<const ImageRecord> corpus) {
  std::vector<json> rows;
  rows.reserve(corpus.size());
  for (const auto& r : corpus) rows.push_back(to_json(r));
  write_jsonl(path, rows);
}

json to_json(const Triplet& t) {
  json row{{"ref_id", t.ref_id}, {"target_id", t.target_id}, {"modifier", t.modifier},
           {"source", std::string(to_string(t.source))}};
  if (t.reverse_modifier) row["reverse_modifier"] = *t.reverse_modifier;
  return row;
}

Triplet triplet_from_json(const json& row) {
  Triplet t;
  t.ref_id = required_string(row, "ref_id");
  t.target_id = required_string(row, "target_id");
  t.modifier = required_string(row, "modifier");
  const std::string source = required_string(row, "source");
  auto prov = parse_provenance(source);
  if (!prov) throw std::invalid_argument("unknown source '" + source + "'");
  t.source = *prov;
  t.reverse_modifier = optional_string(row, "reverse_modifier");
  return t;
}

std::vector<Triplet> load_triplets(const std::filesystem::path& path) {
  std::vector<Triplet> out;
  for_each_jsonl(path, [&](const json& row, std::size_t line) {
    try {
      out.push_back(triplet_from_json(row));
    } catch (const std::invalid_argument& e) {
      throw ParseError(path.string(), line, e.what());
    }
  });
  return out;
}

void save_triplets(const std::filesystem::path& path, std::span<const Triplet> triplets) {
  std::vector<json> rows;
  rows.reserve(triplets.size());
  for (const auto& t : triplets) rows.push_back(to_json(t));
  write_jsonl(path, rows);
}

const ImageRecord* find_image(std::span<const ImageRecord> corpus, std::string_view id) {
  for (const auto& r : corpus)
    if (r.id == id) return &r;
  return nullptr;
}

}  // namespace mtst
