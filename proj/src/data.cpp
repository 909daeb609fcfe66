#include "spatialgeo/data.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "spatialgeo/errors.hpp"

namespace spatialgeo {

using nlohmann::json;

namespace {

std::string with_id(const std::string& msg, const std::string& id) {
    return id.empty() ? msg : "record '" + id + "': " + msg;
}

}  // namespace

void BBox::validate(const std::string& record_id) const {
    if (!(image_width > 0 && image_height > 0)) throw DataError(with_id("bbox image dimensions must be positive", record_id));
    if (!(w > 0 && h > 0)) throw DataError(with_id("bbox width and height must be positive", record_id));
    if (x < 0 || y < 0) throw DataError(with_id("bbox origin outside image", record_id));
    if (x + w > image_width) throw DataError(with_id("bbox x + w exceeds image width", record_id));
    if (y + h > image_height) throw DataError(with_id("bbox y + h exceeds image height", record_id));
}

void RelBBox::validate(const std::string& record_id) const {
    for (double v : {x, y, w, h}) {
        if (!(v >= 0.0 && v <= 1.0)) throw DataError(with_id("relative bbox field outside [0, 1]", record_id));
    }
    if (!(w > 0 && h > 0)) throw DataError(with_id("relative bbox width and height must be positive", record_id));
    if (x + w > 1.0) throw DataError(with_id("relative bbox x + w exceeds 1", record_id));
    if (y + h > 1.0) throw DataError(with_id("relative bbox y + h exceeds 1", record_id));
}

RelBBox rescale_bbox(const BBox& b, const std::string& record_id) {
    b.validate(record_id);
    return RelBBox{b.x / b.image_width, b.y / b.image_height, b.w / b.image_width, b.h / b.image_height};
}

BBox unrescale_bbox(const RelBBox& r, double image_width, double image_height) {
    return BBox{r.x * image_width, r.y * image_height, r.w * image_width, r.h * image_height, image_width, image_height};
}

std::vector<std::size_t> subsample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k > n) {
        throw ContractError("subsample: cannot draw " + std::to_string(k) + " of " + std::to_string(n) + " records");
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, 0x5b5));
    // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ---- synthetic scenes ---------------------------------------------------------------

void SynthConfig::validate() const {
    if (cell == 0 || image_side % cell != 0) throw ConfigError("synth: image_side must be a multiple of cell");
    if (classes == 0) throw ConfigError("synth: need at least one class");
    if (!(min_value > 0.0 && max_value > min_value)) throw ConfigError("synth: metric range must be positive");
}

double disc_radius(const SyntheticScene& s, const SynthConfig& cfg) {
    const double t = (s.geometry - cfg.min_value) / (cfg.max_value - cfg.min_value);
    const double base = 2.0 + 8.0 * static_cast<double>(s.object_class) / static_cast<double>(cfg.classes);
    return base + 8.0 * t;
}

ImageGrid render_scene(const SyntheticScene& s, const SynthConfig& cfg) {
    cfg.validate();
    if (s.object_class >= cfg.classes || s.cell_x >= cfg.grid() || s.cell_y >= cfg.grid()) {
        throw DataError("render_scene: scene outside configured grid/classes");
    }
    const std::size_t side = cfg.image_side;
    ImageGrid img(side, side, 0.0);
    const double tint = static_cast<double>(s.object_class + 1) / static_cast<double>(cfg.classes + 1);
    for (std::size_t y = 0; y < cfg.cell; ++y) {
        for (std::size_t x = 0; x < cfg.cell; ++x) {
            const bool on = (mix_seed(derive_seed(s.object_class, y, x)) & 1ULL) != 0;
            img.set(s.cell_y * cfg.cell + y, s.cell_x * cfg.cell + x, 0, on ? 1.0 : 0.25);
            img.set(s.cell_y * cfg.cell + y, s.cell_x * cfg.cell + x, 1, tint);
        }
    }
    const double cx = (static_cast<double>(s.cell_x) + 0.5) * static_cast<double>(cfg.cell);
    const double cy = (static_cast<double>(s.cell_y) + 0.5) * static_cast<double>(cfg.cell);
    const double r = disc_radius(s, cfg);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const double d = std::hypot(static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy);
            img.set(y, x, ImageGrid::kGeometryChannel, std::clamp(r - d + 0.5, 0.0, 1.0));
        }
    }
    return img;
}

std::string question_for(QuestionCategory c) {
    switch (c) {
        case QuestionCategory::Height: return "what is the height of the object ?";
        case QuestionCategory::Width: return "what is the width of the object ?";
        case QuestionCategory::VerticalDistance: return "what is the vertical distance of the object ?";
        case QuestionCategory::HorizontalDistance: return "what is the horizontal distance to the object ?";
        case QuestionCategory::DirectDistance: return "what is the direct distance to the object ?";
    }
    return "";
}

std::string answer_text(double meters) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f m", meters);
    return buf;
}

namespace {

double draw_value(Rng& rng, const SynthConfig& cfg) {
    const auto steps = static_cast<std::uint64_t>(std::llround((cfg.max_value - cfg.min_value) * 10.0));
    return std::round((cfg.min_value + 0.1 * static_cast<double>(rng.below(steps + 1))) * 10.0) / 10.0;
}

}  // namespace

SyntheticScene random_scene(Rng& rng, const SynthConfig& cfg) {
    cfg.validate();
    SyntheticScene s;
    s.object_class = static_cast<std::size_t>(rng.below(cfg.classes));
    s.cell_x = static_cast<std::size_t>(rng.below(cfg.grid()));
    s.cell_y = static_cast<std::size_t>(rng.below(cfg.grid()));
    s.geometry = draw_value(rng, cfg);
    return s;
}

SyntheticScene geometry_variant(const SyntheticScene& s, Rng& rng, const SynthConfig& cfg) {
    SyntheticScene out = s;
    while (out.geometry == s.geometry) out.geometry = draw_value(rng, cfg);
    return out;
}

std::vector<VQARecord> generate_synth_dataset(std::size_t count, std::uint64_t seed, const SynthConfig& cfg) {
    cfg.validate();
    std::vector<VQARecord> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, 0xda7a, i));
        VQARecord r;
        char id[32];
        std::snprintf(id, sizeof(id), "synth-%06zu", i);
        r.id = id;
        r.scene = random_scene(rng, cfg);
        r.category = kAllCategories[rng.below(kAllCategories.size())];
        r.question = question_for(r.category);
        r.answer = answer_text(r.scene->geometry);
        r.ground_truth = Quantity{r.scene->geometry, LengthUnit::Meter};
        const auto side = static_cast<double>(cfg.image_side), cell = static_cast<double>(cfg.cell);
        r.boxes.push_back(rescale_bbox(
            BBox{static_cast<double>(r.scene->cell_x) * cell, static_cast<double>(r.scene->cell_y) * cell, cell, cell,
                 side, side},
            r.id));
        out.push_back(std::move(r));
    }
    return out;
}

// ---- JSONL ------------------------------------------------------------------------------

std::string vqa_record_to_json(const VQARecord& r) {
    json j;
    j["id"] = r.id;
    if (r.scene) {
        j["scene"] = {{"class", r.scene->object_class},
                      {"cell_x", r.scene->cell_x},
                      {"cell_y", r.scene->cell_y},
                      {"geometry", r.scene->geometry}};
    } else {
        j["image"] = r.image;
    }
    j["question"] = r.question;
    j["answer"] = r.answer;
    j["category"] = category_name(r.category);
    if (r.ground_truth) {
        j["gt_value"] = r.ground_truth->value;
        j["gt_unit"] = unit_name(r.ground_truth->unit);
    }
    json boxes = json::array();
    for (const auto& b : r.boxes) boxes.push_back({{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
    j["bboxes"] = boxes;
    return j.dump();
}

std::string dataset_to_jsonl(const std::vector<VQARecord>& records) {
    std::string out;
    for (const auto& r : records) out += vqa_record_to_json(r) + "\n";
    return out;
}

namespace {

// Shared by the loader and the validator. Each detected problem is appended
// once; the loader turns the first into an exception.
void check_record(const json& j, const SynthConfig& cfg, std::vector<Violation>& out, std::size_t line,
                  const std::string& id) {
    auto bad = [&](const std::string& field, const std::string& msg) { out.push_back({line, id, field, msg}); };
    if (id.empty()) bad("id", "missing or empty string");

    if (!j.contains("category") || !j["category"].is_string() || !parse_category(j["category"].get<std::string>())) {
        bad("category", "missing or not one of the five question categories");
    }
    if (!j.contains("question") || !j["question"].is_string() || j["question"].get<std::string>().empty()) {
        bad("question", "missing or empty string");
    }
    const bool quantitative = j.contains("gt_value");
    if (quantitative) {
        if (!j["gt_value"].is_number() || !(j["gt_value"].get<double>() > 0.0)) bad("gt_value", "must be a positive number");
        if (!j.contains("gt_unit") || !j["gt_unit"].is_string() || !parse_unit(j["gt_unit"].get<std::string>())) {
            bad("gt_unit", "missing or not a known length unit");
        }
    }
    if (!j.contains("answer") || !j["answer"].is_string()) {
        bad("answer", "missing string");
    } else if (quantitative && !parse_quantity(j["answer"].get<std::string>())) {
        bad("answer", "no number followed by a length unit");
    }

    if (j.contains("scene")) {
        const auto& s = j["scene"];
        if (!s.is_object()) {
            bad("scene", "must be an object");
        } else {
            if (!s.contains("class") || !s["class"].is_number_unsigned() || s["class"].get<std::size_t>() >= cfg.classes) {
                bad("scene.class", "missing or out of range");
            }
            for (const char* k : {"cell_x", "cell_y"}) {
                if (!s.contains(k) || !s[k].is_number_unsigned() || s[k].get<std::size_t>() >= cfg.grid()) {
                    bad(std::string("scene.") + k, "missing or outside the cell grid");
                }
            }
            if (!s.contains("geometry") || !s["geometry"].is_number() ||
                s["geometry"].get<double>() < cfg.min_value - 1e-9 || s["geometry"].get<double>() > cfg.max_value + 1e-9) {
                bad("scene.geometry", "missing or outside the configured metric range");
            }
        }
    } else if (!j.contains("image") || !j["image"].is_string() || j["image"].get<std::string>().empty()) {
        bad("image", "record needs an inline scene or an image path");
    }

    if (j.contains("bboxes")) {
        if (!j["bboxes"].is_array()) {
            bad("bboxes", "must be an array");
        } else {
            for (std::size_t k = 0; k < j["bboxes"].size(); ++k) {
                const auto& b = j["bboxes"][k];
                const std::string base = "bboxes[" + std::to_string(k) + "]";
                bool fields_ok = b.is_object();
                for (const char* f : {"x", "y", "w", "h"}) {
                    if (!fields_ok) break;
                    if (!b.contains(f) || !b[f].is_number()) {
                        bad(base + "." + f, "missing number");
                        fields_ok = false;
                    } else if (const double v = b[f].get<double>(); !(v >= 0.0 && v <= 1.0)) {
                        bad(base + "." + f, "outside [0, 1]");
                        fields_ok = false;
                    }
                }
                if (!b.is_object()) {
                    bad(base, "must be an object");
                    continue;
                }
                if (!fields_ok) continue;
                if (!(b["w"].get<double>() > 0 && b["h"].get<double>() > 0)) bad(base + ".w/h", "must be positive");
                if (b["x"].get<double>() + b["w"].get<double>() > 1.0) bad(base + ".x+w", "exceeds 1");
                if (b["y"].get<double>() + b["h"].get<double>() > 1.0) bad(base + ".y+h", "exceeds 1");
            }
        }
    }
}

}  // namespace

VQARecord vqa_record_from_json(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw DataError("record is not a JSON object");
    const std::string id = j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>() : "";
    std::vector<Violation> issues;
    check_record(j, SynthConfig{}, issues, 0, id);
    if (!issues.empty()) throw DataError(with_id(issues[0].field + ": " + issues[0].message, id));

    VQARecord r;
    r.id = id;
    if (j.contains("scene")) {
        const auto& s = j["scene"];
        r.scene = SyntheticScene{s["class"].get<std::size_t>(), s["cell_x"].get<std::size_t>(),
                                 s["cell_y"].get<std::size_t>(), s["geometry"].get<double>()};
    } else {
        r.image = j["image"].get<std::string>();
    }
    r.question = j["question"].get<std::string>();
    r.answer = j["answer"].get<std::string>();
    r.category = *parse_category(j["category"].get<std::string>());
    if (j.contains("gt_value")) {
        r.ground_truth = Quantity{j["gt_value"].get<double>(), *parse_unit(j["gt_unit"].get<std::string>())};
    }
    if (j.contains("bboxes")) {
        for (const auto& b : j["bboxes"]) {
            r.boxes.push_back(RelBBox{b["x"].get<double>(), b["y"].get<double>(), b["w"].get<double>(), b["h"].get<double>()});
        }
    }
    return r;
}

std::vector<VQARecord> read_dataset(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open dataset '" + path.string() + "'");
    std::vector<VQARecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(vqa_record_from_json(line));
        } catch (const DataError& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_dataset(const std::filesystem::path& path, const std::vector<VQARecord>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << dataset_to_jsonl(records);
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<Violation> validate_jsonl_text(std::string_view text, const SynthConfig& cfg) {
    std::vector<Violation> out;
    std::set<std::string> seen;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception&) {
            out.push_back({lineno, "", "", "malformed JSON"});
            continue;
        }
        if (!j.is_object()) {
            out.push_back({lineno, "", "", "line is not a JSON object"});
            continue;
        }
        const std::string id = j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>() : "";
        check_record(j, cfg, out, lineno, id);
        if (!id.empty() && !seen.insert(id).second) out.push_back({lineno, id, "id", "duplicate id"});
    }
    return out;
}

std::vector<Violation> validate_jsonl(const std::filesystem::path& path, const SynthConfig& cfg) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return validate_jsonl_text(ss.str(), cfg);
}

}  // namespace spatialgeo
