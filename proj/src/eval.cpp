#include "spatialgeo/eval.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "spatialgeo/errors.hpp"

namespace spatialgeo {

using nlohmann::json;

double unit_factor(LengthUnit u) {
    switch (u) {
        case LengthUnit::Millimeter: return 0.001;
        case LengthUnit::Centimeter: return 0.01;
        case LengthUnit::Meter: return 1.0;
        case LengthUnit::Kilometer: return 1000.0;
        case LengthUnit::Inch: return 0.0254;
        case LengthUnit::Foot: return 0.3048;
        case LengthUnit::Yard: return 0.9144;
    }
    return 1.0;
}

const char* unit_name(LengthUnit u) {
    switch (u) {
        case LengthUnit::Millimeter: return "millimeter";
        case LengthUnit::Centimeter: return "centimeter";
        case LengthUnit::Meter: return "meter";
        case LengthUnit::Kilometer: return "kilometer";
        case LengthUnit::Inch: return "inch";
        case LengthUnit::Foot: return "foot";
        case LengthUnit::Yard: return "yard";
    }
    return "?";
}

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

struct Synonym {
    const char* word;
    LengthUnit unit;
};

constexpr Synonym kLexicon[] = {
    {"mm", LengthUnit::Millimeter},         {"millimeter", LengthUnit::Millimeter},
    {"millimeters", LengthUnit::Millimeter}, {"millimetre", LengthUnit::Millimeter},
    {"millimetres", LengthUnit::Millimeter}, {"cm", LengthUnit::Centimeter},
    {"centimeter", LengthUnit::Centimeter}, {"centimeters", LengthUnit::Centimeter},
    {"centimetre", LengthUnit::Centimeter}, {"centimetres", LengthUnit::Centimeter},
    {"m", LengthUnit::Meter},               {"meter", LengthUnit::Meter},
    {"meters", LengthUnit::Meter},          {"metre", LengthUnit::Meter},
    {"metres", LengthUnit::Meter},          {"km", LengthUnit::Kilometer},
    {"kilometer", LengthUnit::Kilometer},   {"kilometers", LengthUnit::Kilometer},
    {"kilometre", LengthUnit::Kilometer},   {"kilometres", LengthUnit::Kilometer},
    {"in", LengthUnit::Inch},               {"inch", LengthUnit::Inch},
    {"inches", LengthUnit::Inch},           {"\"", LengthUnit::Inch},
    {"ft", LengthUnit::Foot},               {"foot", LengthUnit::Foot},
    {"feet", LengthUnit::Foot},             {"'", LengthUnit::Foot},
    {"yd", LengthUnit::Yard},               {"yds", LengthUnit::Yard},
    {"yard", LengthUnit::Yard},             {"yards", LengthUnit::Yard},
};

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

// Clause boundaries: , ; : ! ? newline, and a period that ends a sentence
// (followed by whitespace or end of text).
bool is_clause_end(std::string_view s, std::size_t i) {
    const char c = s[i];
    if (c == ',' || c == ';' || c == ':' || c == '!' || c == '?' || c == '\n') return true;
    if (c == '.') return i + 1 >= s.size() || std::isspace(static_cast<unsigned char>(s[i + 1]));
    return false;
}

// Finds the first numeric literal: digits with optional 3-digit comma groups
// and an optional fractional part, or a bare ".5".
std::optional<std::pair<double, std::size_t>> first_number(std::string_view s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
        const bool lead_dot = s[i] == '.' && i + 1 < s.size() && is_digit(s[i + 1]) && (i == 0 || !is_digit(s[i - 1]));
        if (!is_digit(s[i]) && !lead_dot) continue;
        std::string digits;
        std::size_t j = i;
        while (j < s.size() && is_digit(s[j])) digits.push_back(s[j++]);
        // Thousands separators: ",ddd" not followed by another digit.
        while (j + 3 < s.size() && s[j] == ',' && is_digit(s[j + 1]) && is_digit(s[j + 2]) && is_digit(s[j + 3]) &&
               (j + 4 >= s.size() || !is_digit(s[j + 4]))) {
            digits.append(s.substr(j + 1, 3));
            j += 4;
        }
        if (j < s.size() && s[j] == '.' && j + 1 < s.size() && is_digit(s[j + 1])) {
            digits.push_back('.');
            ++j;
            while (j < s.size() && is_digit(s[j])) digits.push_back(s[j++]);
        }
        if (digits.empty() || digits == ".") continue;
        if (digits[0] == '.') digits.insert(digits.begin(), '0');
        double v = 0.0;
        auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
        if (ec != std::errc() || !std::isfinite(v)) return std::nullopt;
        return std::pair{v, j};
    }
    return std::nullopt;
}

}  // namespace

std::optional<LengthUnit> parse_unit(std::string_view token) {
    const auto t = lower(token);
    for (const auto& s : kLexicon) {
        if (t == s.word) return s.unit;
    }
    return std::nullopt;
}

std::optional<Quantity> parse_quantity(std::string_view answer) {
    const auto num = first_number(answer);
    if (!num) return std::nullopt;
    std::size_t i = num->second;
    while (i < answer.size()) {
        const char c = answer[i];
        // Foot/inch marks only count directly after the number (5' or 5").
        if ((c == '\'' || c == '"') && i == num->second) {
            return Quantity{num->first, *parse_unit(answer.substr(i, 1))};
        }
        if (is_alpha(c)) {
            std::size_t j = i;
            while (j < answer.size() && is_alpha(answer[j])) ++j;
            if (auto u = parse_unit(answer.substr(i, j - i))) return Quantity{num->first, *u};
            i = j;
            continue;
        }
        if (is_clause_end(answer, i)) return std::nullopt;
        ++i;
    }
    return std::nullopt;
}

double to_meters(const Quantity& q) { return q.value * unit_factor(q.unit); }

bool score(double pred_m, double gt_m) {
    if (!(gt_m > 0.0) || !std::isfinite(gt_m)) throw DataError("score: ground truth must be positive and finite");
    const double ratio = pred_m / gt_m;
    return ratio >= kBandLow - kBandSlack && ratio <= kBandHigh + kBandSlack;
}

const char* category_name(QuestionCategory c) {
    switch (c) {
        case QuestionCategory::Height: return "height";
        case QuestionCategory::Width: return "width";
        case QuestionCategory::VerticalDistance: return "vertical_distance";
        case QuestionCategory::HorizontalDistance: return "horizontal_distance";
        case QuestionCategory::DirectDistance: return "direct_distance";
    }
    return "?";
}

std::optional<QuestionCategory> parse_category(std::string_view s) {
    std::string t = lower(s);
    std::replace(t.begin(), t.end(), '-', '_');
    std::replace(t.begin(), t.end(), ' ', '_');
    for (auto c : kAllCategories) {
        if (t == category_name(c)) return c;
    }
    return std::nullopt;
}

void score_record(EvalRecord& r) {
    r.parsed = parse_quantity(r.answer);
    r.correct.reset();
    if (r.parsed) r.correct = score(to_meters(*r.parsed), to_meters(r.ground_truth));
}

Report aggregate(std::vector<EvalRecord> records) {
    if (records.empty()) throw DataError("aggregate: no records");
    Report rep;
    for (auto c : kAllCategories) rep.categories.push_back(CategoryStats{c, 0, 0, std::nullopt});
    for (auto& r : records) {
        if (!r.correct.has_value()) score_record(r);
        const bool ok = r.correct.value_or(false);
        if (!r.parsed) ++rep.parse_failures;
        auto& cs = rep.categories[static_cast<std::size_t>(r.category)];
        ++cs.total;
        ++rep.total;
        if (ok) {
            ++cs.correct;
            ++rep.correct;
        }
    }
    for (auto& cs : rep.categories) {
        if (cs.total > 0) cs.accuracy = 100.0 * static_cast<double>(cs.correct) / static_cast<double>(cs.total);
    }
    rep.average = 100.0 * static_cast<double>(rep.correct) / static_cast<double>(rep.total);
    return rep;
}

// ---- JSONL ----------------------------------------------------------------------------

EvalLoad parse_eval_records(std::string_view jsonl) {
    EvalLoad out;
    std::istringstream is{std::string(jsonl)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        JsonlIssue issue{lineno, "", ""};
        try {
            const json j = json::parse(line);
            if (!j.is_object()) throw DataError("line is not a JSON object");
            if (j.contains("id") && j["id"].is_string()) issue.id = j["id"].get<std::string>();
            if (issue.id.empty()) throw DataError("missing string field 'id'");
            EvalRecord r;
            r.id = issue.id;
            if (!j.contains("category") || !j["category"].is_string()) throw DataError("missing string field 'category'");
            auto cat = parse_category(j["category"].get<std::string>());
            if (!cat) throw DataError("unknown category '" + j["category"].get<std::string>() + "'");
            r.category = *cat;
            if (!j.contains("gt_value") || !j["gt_value"].is_number()) throw DataError("missing numeric field 'gt_value'");
            r.ground_truth.value = j["gt_value"].get<double>();
            if (!(r.ground_truth.value > 0.0) || !std::isfinite(r.ground_truth.value)) {
                throw DataError("gt_value must be positive");
            }
            if (!j.contains("gt_unit") || !j["gt_unit"].is_string()) throw DataError("missing string field 'gt_unit'");
            auto unit = parse_unit(j["gt_unit"].get<std::string>());
            if (!unit) throw DataError("unknown gt_unit '" + j["gt_unit"].get<std::string>() + "'");
            r.ground_truth.unit = *unit;
            if (!j.contains("answer") || !j["answer"].is_string()) throw DataError("missing string field 'answer'");
            r.answer = j["answer"].get<std::string>();
            out.records.push_back(std::move(r));
        } catch (const json::exception& e) {
            issue.message = std::string("malformed JSON: ") + e.what();
            out.issues.push_back(issue);
        } catch (const DataError& e) {
            issue.message = e.what();
            out.issues.push_back(issue);
        }
    }
    return out;
}

EvalLoad read_eval_records(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_eval_records(ss.str());
}

std::string format_number(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw ContractError("format_number: conversion failed");
    return std::string(buf, p);
}

std::string eval_record_to_json(const EvalRecord& r) {
    json j;
    j["id"] = r.id;
    j["category"] = category_name(r.category);
    j["gt_value"] = r.ground_truth.value;
    j["gt_unit"] = unit_name(r.ground_truth.unit);
    j["answer"] = r.answer;
    if (r.parsed) {
        j["parsed_value"] = r.parsed->value;
        j["parsed_unit"] = unit_name(r.parsed->unit);
    } else {
        j["parsed_value"] = nullptr;
        j["parsed_unit"] = nullptr;
    }
    j["correct"] = r.correct.value_or(false);
    return j.dump();
}

std::string report_to_json(const Report& r) {
    json j;
    json cats = json::array();
    for (const auto& c : r.categories) {
        json e;
        e["category"] = category_name(c.category);
        e["total"] = c.total;
        e["correct"] = c.correct;
        e["accuracy"] = c.accuracy ? json(*c.accuracy) : json(nullptr);
        cats.push_back(e);
    }
    j["categories"] = cats;
    j["average"] = r.average;
    j["total"] = r.total;
    j["correct"] = r.correct;
    j["parse_failures"] = r.parse_failures;
    return j.dump(2) + "\n";
}

std::string report_to_csv(const Report& r) {
    std::string out = "category,total,correct,accuracy\n";
    for (const auto& c : r.categories) {
        out += std::string(category_name(c.category)) + "," + std::to_string(c.total) + "," +
               std::to_string(c.correct) + "," + (c.accuracy ? format_number(*c.accuracy) : "NA") + "\n";
    }
    out += "average," + std::to_string(r.total) + "," + std::to_string(r.correct) + "," + format_number(r.average) + "\n";
    return out;
}

std::string report_plot_csv(const Report& r) {
    std::string out = "category,accuracy\n";
    for (const auto& c : r.categories) {
        if (c.accuracy) out += std::string(category_name(c.category)) + "," + format_number(*c.accuracy) + "\n";
    }
    out += "average," + format_number(r.average) + "\n";
    return out;
}

}  // namespace spatialgeo
