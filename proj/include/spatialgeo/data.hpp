#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "spatialgeo/encoders.hpp"
#include "spatialgeo/eval.hpp"
#include "spatialgeo/rng.hpp"

namespace spatialgeo {

// ---- bounding boxes ---------------------------------------------------------------

// Absolute pixel box inside a width x height image.
struct BBox {
    double x = 0, y = 0, w = 0, h = 0;
    double image_width = 0, image_height = 0;

    // Throws DataError naming record_id when the box leaves the image or is empty.
    void validate(const std::string& record_id = "") const;
};

// Corner-normalized box: every field in [0, 1], x + w <= 1, y + h <= 1.
struct RelBBox {
    double x = 0, y = 0, w = 0, h = 0;

    void validate(const std::string& record_id = "") const;
    friend bool operator==(const RelBBox&, const RelBBox&) = default;
};

RelBBox rescale_bbox(const BBox& b, const std::string& record_id = "");
BBox unrescale_bbox(const RelBBox& r, double image_width, double image_height);

// ---- subsampling ------------------------------------------------------------------

// k indices drawn uniformly without replacement from [0, n), ascending.
std::vector<std::size_t> subsample_indices(std::size_t n, std::size_t k, std::uint64_t seed);

// Uniform sample without replacement; survivors keep their input order.
template <typename T>
std::vector<T> subsample(const std::vector<T>& records, std::size_t k, std::uint64_t seed) {
    std::vector<T> out;
    out.reserve(k);
    for (auto i : subsample_indices(records.size(), k, seed)) out.push_back(records[i]);
    return out;
}

// ---- synthetic geometry-separable scenes ---------------------------------------------

struct SynthConfig {
    std::size_t image_side = 32;
    std::size_t cell = 8;  // glyph size; glyphs sit on the cell grid
    std::size_t classes = 4;
    double min_value = 1.0;  // metric range of the answers, meters
    double max_value = 9.0;

    std::size_t grid() const { return image_side / cell; }
    void validate() const;
};

// Semantic channel: object class and glyph placement. Geometry channel: one
// metric value (meters, multiple of 0.1). The answer depends only on the latter.
struct SyntheticScene {
    std::size_t object_class = 0;
    std::size_t cell_x = 0;
    std::size_t cell_y = 0;
    double geometry = 1.0;

    bool same_semantics(const SyntheticScene& o) const {
        return object_class == o.object_class && cell_x == o.cell_x && cell_y == o.cell_y;
    }
    friend bool operator==(const SyntheticScene&, const SyntheticScene&) = default;
};

// Appearance channels carry the class glyph at its cell. The geometry channel
// carries a disc centered on the glyph whose radius grows with the metric
// value from a class-dependent base, so reading the value off the disc needs
// the object identity as well.
ImageGrid render_scene(const SyntheticScene& s, const SynthConfig& cfg);

double disc_radius(const SyntheticScene& s, const SynthConfig& cfg);

struct VQARecord {
    std::string id;
    std::optional<SyntheticScene> scene;
    std::string image;  // path, used when no inline scene is given
    std::string question;
    std::string answer;
    QuestionCategory category = QuestionCategory::Height;
    std::optional<Quantity> ground_truth;
    std::vector<RelBBox> boxes;
};

std::string question_for(QuestionCategory c);
std::string answer_text(double meters);

SyntheticScene random_scene(Rng& rng, const SynthConfig& cfg);
// Same semantic channel, geometry redrawn until it differs.
SyntheticScene geometry_variant(const SyntheticScene& s, Rng& rng, const SynthConfig& cfg);

std::vector<VQARecord> generate_synth_dataset(std::size_t count, std::uint64_t seed, const SynthConfig& cfg = {});

std::string vqa_record_to_json(const VQARecord& r);
std::string dataset_to_jsonl(const std::vector<VQARecord>& records);
VQARecord vqa_record_from_json(const std::string& line);
std::vector<VQARecord> read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const std::vector<VQARecord>& records);

struct Violation {
    std::size_t line = 0;
    std::string id;
    std::string field;
    std::string message;
};

// Per-line schema and invariant check of a VQA JSONL file.
std::vector<Violation> validate_jsonl_text(std::string_view text, const SynthConfig& cfg = {});
std::vector<Violation> validate_jsonl(const std::filesystem::path& path, const SynthConfig& cfg = {});

}  // namespace spatialgeo
