#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace mtst {

// An image identity standing in for pixels. set_id mirrors CIRR-style
// clusters, labels FashionIQ-style attributes, category NLVR2-style classes.
struct ImageRecord {
  std::string id;
  std::optional<std::string> set_id;
  std::vector<std::string> labels;  // sorted, unique
  std::optional<std::string> category;

  bool operator==(const ImageRecord&) const = default;
};

// Where a triplet's modifier came from.
enum class Provenance { set, category, label, external, oracle, model };

std::string_view to_string(Provenance p);
std::optional<Provenance> parse_provenance(std::string_view text);

struct Triplet {
  std::string ref_id;
  std::string target_id;
  std::string modifier;
  Provenance source = Provenance::oracle;
  // Target-to-reference text for the prototype loss; cached at synthesis time.
  std::optional<std::string> reverse_modifier;

  bool operator==(const Triplet&) const = default;
};

ImageRecord make_image(std::string id, std::vector<std::string> labels = {},
                       std::optional<std::string> set_id = std::nullopt,
                       std::optional<std::string> category = std::nullopt);

// Calls fn(object, line_number) for every non-blank line. Lines that are not
// JSON objects raise ParseError with the line number.
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(const nlohmann::json&, std::size_t)>& fn);

// Writes one compact JSON document per line.
void write_jsonl(const std::filesystem::path& path, std::span<const nlohmann::json> rows);

std::vector<ImageRecord> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, std::span<const ImageRecord> corpus);

nlohmann::json to_json(const ImageRecord& record);
nlohmann::json to_json(const Triplet& triplet);
// Throws std::invalid_argument naming the offending field.
Triplet triplet_from_json(const nlohmann::json& row);

// Strict loader: any malformed line aborts with ParseError.
std::vector<Triplet> load_triplets(const std::filesystem::path& path);
void save_triplets(const std::filesystem::path& path, std::span<const Triplet> triplets);

const ImageRecord* find_image(std::span<const ImageRecord> corpus, std::string_view id);

}  // namespace mtst
