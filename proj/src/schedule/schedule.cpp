#include "cwdiff/schedule/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "cwdiff/error.hpp"
#include "cwdiff/io/json_fields.hpp"

namespace cwdiff {

const char* to_string(ScheduleMode mode) noexcept {
    return mode == ScheduleMode::continuous_cosine ? "continuous-cosine" : "sdm-switch";
}

ScheduleMode schedule_mode_from_string(const std::string& s) {
    if (s == "continuous-cosine") return ScheduleMode::continuous_cosine;
    if (s == "sdm-switch") return ScheduleMode::sdm_switch;
    fail(ErrorKind::invalid_argument, "unknown schedule mode '" + s + "'");
}

const char* to_string(Group g) noexcept {
    switch (g) {
        case Group::geometry: return "geometry";
        case Group::material: return "material";
        case Group::lighting: return "lighting";
    }
    return "?";
}

bool valid_sdm_steps(int T) noexcept { return T == 1 || (T >= 4 && (T - 1) % 3 == 0); }

void ScheduleSpec::validate() const {
    require(s >= 0.0 && s < b && b <= 1.0, ErrorKind::invalid_argument,
            "schedule offsets must satisfy 0 <= s < b <= 1");
    for (double tau : taus) {
        require(tau > 0.0 && std::isfinite(tau), ErrorKind::invalid_argument, "tau values must be positive");
    }
    require(T >= 1, ErrorKind::invalid_argument, "T must be >= 1");
    if (mode == ScheduleMode::sdm_switch) {
        require(valid_sdm_steps(T), ErrorKind::invalid_argument,
                "switchable schedule needs T = 1 or T = 3n+1, got " + std::to_string(T));
    }
}

GroupLayout GroupLayout::standard(std::size_t feature_dim) {
    GroupLayout l;
    l.ranges = {{{0, 4}, {4, 8}, {8, 8 + feature_dim}}};
    return l;
}

Group GroupLayout::group_of(std::size_t channel) const {
    for (std::size_t g = 0; g < kGroupCount; ++g) {
        if (channel >= ranges[g].first && channel < ranges[g].second) {
            return static_cast<Group>(g);
        }
    }
    fail(ErrorKind::invalid_argument, "channel " + std::to_string(channel) + " outside the latent layout");
}

void GroupLayout::validate() const {
    std::size_t expect = 0;
    for (const auto& [begin, end] : ranges) {
        require(begin == expect && end > begin, ErrorKind::invalid_argument,
                "group ranges must be contiguous, disjoint and non-empty");
        expect = end;
    }
}

const GroupAlphas& ScheduleTable::at(int t) const {
    require(t >= 0 && t < T, ErrorKind::invalid_argument,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(T - 1) + "]");
    return alpha_bar[static_cast<std::size_t>(t)];
}

std::vector<double> ScheduleTable::channel_alphas(int t, const GroupLayout& layout) const {
    const GroupAlphas& a = at(t);
    std::vector<double> out(layout.channels());
    for (std::size_t g = 0; g < kGroupCount; ++g) {
        std::fill(out.begin() + static_cast<long>(layout.ranges[g].first),
                  out.begin() + static_cast<long>(layout.ranges[g].second), a[g]);
    }
    return out;
}

double alpha_bar_cosine(double t_norm, double tau, double s, double b) {
    require(t_norm >= 0.0 && t_norm <= 1.0, ErrorKind::invalid_argument, "normalized time must lie in [0, 1]");
    require(tau > 0.0, ErrorKind::invalid_argument, "tau must be positive");
    require(s >= 0.0 && s < b && b <= 1.0, ErrorKind::invalid_argument, "need 0 <= s < b <= 1");
    constexpr double half_pi = std::numbers::pi / 2.0;
    auto power_cos = [tau](double x) { return std::pow(std::max(0.0, std::cos(x * half_pi)), 2.0 * tau); };
    const double v_s = power_cos(s);
    const double v_b = power_cos(b);
    if (t_norm == 0.0) return 1.0;
    if (t_norm == 1.0) return 0.0;
    const double alpha = power_cos((b - s) * t_norm + s);
    return std::clamp((v_b - alpha) / (v_b - v_s), 0.0, 1.0);
}

GroupAlphas sdm_alpha(int t, int T) {
    require(valid_sdm_steps(T), ErrorKind::invalid_argument, "switchable schedule needs T = 1 or T = 3n+1");
    require(t >= 0 && t < T, ErrorKind::invalid_argument, "timestep outside [0, T-1]");
    if (t == T - 1) return {0.0, 0.0, 0.0};
    switch (t % 3) {
        case 0: return {1.0, 1.0, 0.0};
        case 1: return {1.0, 0.0, 1.0};
        default: return {0.0, 1.0, 1.0};
    }
}

ScheduleTable build_schedule(const ScheduleSpec& spec, const GroupLayout& layout) {
    spec.validate();
    layout.validate();
    ScheduleTable table;
    table.mode = spec.mode;
    table.T = spec.T;
    table.alpha_bar.resize(static_cast<std::size_t>(spec.T));
    for (int t = 0; t < spec.T; ++t) {
        if (spec.mode == ScheduleMode::sdm_switch) {
            table.alpha_bar[static_cast<std::size_t>(t)] = sdm_alpha(t, spec.T);
            continue;
        }
        const double t_norm = spec.T == 1 ? 1.0 : static_cast<double>(t) / static_cast<double>(spec.T - 1);
        for (std::size_t g = 0; g < kGroupCount; ++g) {
            table.alpha_bar[static_cast<std::size_t>(t)][g] = alpha_bar_cosine(t_norm, spec.taus[g], spec.s, spec.b);
        }
    }
    return table;
}

double snr(double alpha_bar) {
    if (alpha_bar >= 1.0) return std::numeric_limits<double>::infinity();
    return alpha_bar / (1.0 - alpha_bar);
}

std::vector<CurveRow> export_curves(const ScheduleTable& table) {
    std::vector<CurveRow> rows;
    rows.reserve(kGroupCount * static_cast<std::size_t>(table.T));
    for (std::size_t g = 0; g < kGroupCount; ++g) {
        for (int t = 0; t < table.T; ++t) {
            const double a = table.alpha_bar[static_cast<std::size_t>(t)][g];
            rows.push_back({t, static_cast<Group>(g), a, snr(a)});
        }
    }
    return rows;
}

std::string curves_csv(const std::vector<CurveRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "t,group,alpha_bar,snr\n";
    for (const CurveRow& r : rows) {
        os << r.t << ',' << to_string(r.group) << ',' << r.alpha_bar << ',';
        if (std::isinf(r.snr)) {
            os << "inf";
        } else {
            os << r.snr;
        }
        os << '\n';
    }
    return os.str();
}

std::string curves_svg(const std::vector<CurveRow>& rows, const std::string& title) {
    constexpr double W = 480, H = 320, M = 40;
    static const char* colors[kGroupCount] = {"#1f77b4", "#2ca02c", "#d62728"};
    int T = 1;
    for (const CurveRow& r : rows) T = std::max(T, r.t + 1);
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << M << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">" << title << "</text>\n";
    os << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
    for (std::size_t g = 0; g < kGroupCount; ++g) {
        os << "<polyline fill=\"none\" stroke=\"" << colors[g] << "\" stroke-width=\"1.5\" points=\"";
        for (const CurveRow& r : rows) {
            if (static_cast<std::size_t>(r.group) != g) continue;
            const double u = T == 1 ? 1.0 : static_cast<double>(r.t) / (T - 1);
            os << M + u * (W - 2 * M) << ',' << H - M - r.alpha_bar * (H - 2 * M) << ' ';
        }
        os << "\"/>\n";
        os << "<text x=\"" << W - M - 70 << "\" y=\"" << M + 16 * g << "\" fill=\"" << colors[g]
           << "\" font-family=\"sans-serif\" font-size=\"11\">" << to_string(static_cast<Group>(g)) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

nlohmann::json to_json(const ScheduleSpec& spec) {
    return {{"s", spec.s},
            {"b", spec.b},
            {"taus", spec.taus},
            {"T", spec.T},
            {"mode", to_string(spec.mode)}};
}

GroupAlphas group_alphas_from_json(const nlohmann::json& j, const std::string& context) {
    require(j.is_array() && j.size() == kGroupCount, ErrorKind::schema, context + " must be an array of 3 numbers");
    GroupAlphas out{};
    for (std::size_t i = 0; i < kGroupCount; ++i) {
        require(j[i].is_number(), ErrorKind::schema, context + " must be an array of 3 numbers");
        out[i] = j[i].get<double>();
    }
    return out;
}

ScheduleSpec schedule_spec_from_json(const nlohmann::json& j) {
    ScheduleSpec spec;
    std::string mode = to_string(spec.mode);
    JsonFields(j, "schedule").get("s", spec.s).get("b", spec.b).get("T", spec.T).get("mode", mode).known("taus").finish();
    if (j.contains("taus")) spec.taus = group_alphas_from_json(j.at("taus"), "schedule.taus");
    spec.mode = schedule_mode_from_string(mode);
    spec.validate();
    return spec;
}

}  // namespace cwdiff
