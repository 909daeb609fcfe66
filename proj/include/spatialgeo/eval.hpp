#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace spatialgeo {

enum class LengthUnit { Millimeter, Centimeter, Meter, Kilometer, Inch, Foot, Yard };

inline constexpr std::array<LengthUnit, 7> kAllUnits{LengthUnit::Millimeter, LengthUnit::Centimeter,
                                                     LengthUnit::Meter,      LengthUnit::Kilometer,
                                                     LengthUnit::Inch,       LengthUnit::Foot,
                                                     LengthUnit::Yard};

// Meters per unit (international inch/foot/yard).
double unit_factor(LengthUnit u);
const char* unit_name(LengthUnit u);
// Accepts the unit lexicon: m, meter(s), metre(s), cm, centimeter(s), mm,
// millimeter(s), km, kilometer(s), in, inch(es), ", ft, foot, feet, ', yd,
// yard(s). Case-insensitive.
std::optional<LengthUnit> parse_unit(std::string_view token);

struct Quantity {
    double value = 0.0;
    LengthUnit unit = LengthUnit::Meter;

    friend bool operator==(const Quantity&, const Quantity&) = default;
};

// First numeric literal in the text, paired with the nearest unit token that
// follows it in the same clause. nullopt when either is missing.
std::optional<Quantity> parse_quantity(std::string_view answer);

double to_meters(const Quantity& q);

// Inclusive tolerance band on the ratio pred / gt. Ratios within 1e-9 of a
// bound count as on the bound, so unit conversions that are exact in decimal
// but not in binary still land inside.
inline constexpr double kBandLow = 0.75;
inline constexpr double kBandHigh = 1.25;
inline constexpr double kBandSlack = 1e-9;

bool score(double pred_m, double gt_m);

enum class QuestionCategory { Height, Width, VerticalDistance, HorizontalDistance, DirectDistance };

inline constexpr std::array<QuestionCategory, 5> kAllCategories{
    QuestionCategory::Height, QuestionCategory::Width, QuestionCategory::VerticalDistance,
    QuestionCategory::HorizontalDistance, QuestionCategory::DirectDistance};

const char* category_name(QuestionCategory c);
// Accepts "vertical_distance", "vertical-distance" and "vertical distance".
std::optional<QuestionCategory> parse_category(std::string_view s);

struct EvalRecord {
    std::string id;
    QuestionCategory category = QuestionCategory::Height;
    Quantity ground_truth;
    std::string answer;
    std::optional<Quantity> parsed;
    std::optional<bool> correct;
};

// Parses the answer and, when that succeeds, scores it.
void score_record(EvalRecord& r);

struct CategoryStats {
    QuestionCategory category;
    std::size_t total = 0;
    std::size_t correct = 0;
    std::optional<double> accuracy;  // percent; empty when the category has no records
};

struct Report {
    std::vector<CategoryStats> categories;  // always in kAllCategories order
    double average = 0.0;                   // percent over all records
    std::size_t total = 0;
    std::size_t correct = 0;
    std::size_t parse_failures = 0;
};

// Records that have not been scored yet are scored first. Parse failures
// count as incorrect.
Report aggregate(std::vector<EvalRecord> records);

// ---- file formats ----------------------------------------------------------------
// JSONL input, one object per line: {"id", "category", "gt_value", "gt_unit", "answer"}.

struct JsonlIssue {
    std::size_t line = 0;
    std::string id;
    std::string message;
};

struct EvalLoad {
    std::vector<EvalRecord> records;
    std::vector<JsonlIssue> issues;
};

EvalLoad read_eval_records(const std::filesystem::path& path);
EvalLoad parse_eval_records(std::string_view jsonl);
std::string eval_record_to_json(const EvalRecord& r);

std::string report_to_json(const Report& r);
// category,total,correct,accuracy (plus an "average" row)
std::string report_to_csv(const Report& r);
// category,accuracy for non-empty categories
std::string report_plot_csv(const Report& r);

// Fixed-format rendering used by every report writer: up to 17 significant
// digits with trailing zeros trimmed, so output bytes depend only on values.
std::string format_number(double v);

}  // namespace spatialgeo
