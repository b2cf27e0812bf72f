#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace cwdiff {

enum class ScheduleMode { continuous_cosine, sdm_switch };

const char* to_string(ScheduleMode mode) noexcept;
ScheduleMode schedule_mode_from_string(const std::string& s);

/// Modality groups in generation-order position: geometry (N, D),
/// material (A, R), lighting (ILR feature f).
enum class Group : std::size_t { geometry = 0, material = 1, lighting = 2 };
inline constexpr std::size_t kGroupCount = 3;
const char* to_string(Group g) noexcept;

using GroupAlphas = std::array<double, kGroupCount>;

struct ScheduleSpec {
    double s = 0.008;
    double b = 1.0;
    GroupAlphas taus{0.9, 1.2, 1.5};
    int T = 256;
    ScheduleMode mode = ScheduleMode::continuous_cosine;

    void validate() const;
};

nlohmann::json to_json(const ScheduleSpec& spec);
/// Keys s, b, taus ([3] array), T, mode; unknown keys are rejected.
ScheduleSpec schedule_spec_from_json(const nlohmann::json& j);

/// Reads a [G, M, L] triple.
GroupAlphas group_alphas_from_json(const nlohmann::json& j, const std::string& context);

/// Half-open channel ranges of each group within the latent stack.
struct GroupLayout {
    std::array<std::pair<std::size_t, std::size_t>, kGroupCount> ranges;

    /// N(3) D(1) | A(3) R(1) | f(F)
    static GroupLayout standard(std::size_t feature_dim);

    std::size_t channels() const noexcept { return ranges[2].second; }
    Group group_of(std::size_t channel) const;
    void validate() const;
};

struct ScheduleTable {
    ScheduleMode mode = ScheduleMode::continuous_cosine;
    int T = 0;
    std::vector<GroupAlphas> alpha_bar;  // indexed by integer timestep

    const GroupAlphas& at(int t) const;
    /// Expands the group values at step t to one value per latent channel.
    std::vector<double> channel_alphas(int t, const GroupLayout& layout) const;
};

/// Normalized tau-cosine schedule; the trig argument is x * pi / 2 with
/// x = (b - s) * t_norm + s, normalized so that t_norm = 0 gives 1 and
/// t_norm = 1 gives 0 when b = 1.
double alpha_bar_cosine(double t_norm, double tau, double s = 0.008, double b = 1.0);

/// Switchable binary schedule: (G, M, L) at step t of a T = 3n+1 (or 1) run.
GroupAlphas sdm_alpha(int t, int T);

bool valid_sdm_steps(int T) noexcept;

ScheduleTable build_schedule(const ScheduleSpec& spec, const GroupLayout& layout);

/// alpha_bar / (1 - alpha_bar); +infinity at alpha_bar = 1.
double snr(double alpha_bar);

struct CurveRow {
    int t;
    Group group;
    double alpha_bar;
    double snr;
};

/// Rows sorted by (group, t).
std::vector<CurveRow> export_curves(const ScheduleTable& table);
std::string curves_csv(const std::vector<CurveRow>& rows);
/// Line plot of alpha_bar against normalized time, one polyline per group.
std::string curves_svg(const std::vector<CurveRow>& rows, const std::string& title);

}  // namespace cwdiff
