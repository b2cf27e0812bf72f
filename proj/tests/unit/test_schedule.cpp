#include <cmath>

#include "cwdiff/error.hpp"
#include "cwdiff/schedule/schedule.hpp"
#include "doctest.h"

using namespace cwdiff;

namespace {
const double kTaus[] = {0.5, 0.9, 1.0, 1.2, 1.5, 2.0};
}

TEST_CASE("alpha_bar_cosine: endpoints") {
    for (double tau : kTaus) {
        CHECK(alpha_bar_cosine(0.0, tau) == 1.0);
        CHECK(alpha_bar_cosine(1.0, tau) == 0.0);
        // just inside the interval the formula itself agrees with the endpoints
        CHECK(std::abs(alpha_bar_cosine(1e-15, tau) - 1.0) < 1e-12);
        CHECK(std::abs(alpha_bar_cosine(1.0 - 1e-15, tau)) < 1e-12);
    }
}

TEST_CASE("alpha_bar_cosine: midpoint against 30-digit oracle") {
    // cos(0.504 pi/2)^2 / cos(0.004 pi)^2, evaluated with mpmath at 30 digits
    CHECK(alpha_bar_cosine(0.5, 1.0) == doctest::Approx(0.493794952927317109592244552866).epsilon(1e-14));
    CHECK(alpha_bar_cosine(1.0 / 3.0, 0.9) == doctest::Approx(0.765242524207921740396793612217).epsilon(1e-14));
    CHECK(alpha_bar_cosine(1.0 / 3.0, 1.2) == doctest::Approx(0.699947490456898727391321677762).epsilon(1e-14));
    CHECK(alpha_bar_cosine(1.0 / 3.0, 1.5) == doctest::Approx(0.640223816500550182064202440983).epsilon(1e-14));
}

TEST_CASE("alpha_bar_cosine: rejects invalid arguments") {
    CHECK_THROWS_AS(alpha_bar_cosine(-0.1, 1.0), Error);
    CHECK_THROWS_AS(alpha_bar_cosine(1.1, 1.0), Error);
    CHECK_THROWS_AS(alpha_bar_cosine(0.5, 0.0), Error);
}

TEST_CASE("alpha_bar_cosine: strictly decreasing and tau-ordered on a 1024-point grid") {
    for (double tau : kTaus) {
        double prev = alpha_bar_cosine(0.0, tau);
        for (int i = 1; i < 1024; ++i) {
            const double a = alpha_bar_cosine(i / 1023.0, tau);
            CHECK(a < prev);
            prev = a;
        }
    }
    for (int i = 1; i < 1023; ++i) {
        const double u = i / 1023.0;
        for (std::size_t a = 0; a < 6; ++a)
            for (std::size_t b = a + 1; b < 6; ++b) CHECK(alpha_bar_cosine(u, kTaus[a]) >= alpha_bar_cosine(u, kTaus[b]));
    }
}

TEST_CASE("build_schedule: continuous mode") {
    const auto layout = GroupLayout::standard(16);
    SUBCASE("T=2 has only the endpoints") {
        auto table = build_schedule({.taus = {0.9, 1.2, 1.5}, .T = 2}, layout);
        CHECK(table.at(0) == GroupAlphas{1, 1, 1});
        CHECK(table.at(1) == GroupAlphas{0, 0, 0});
    }
    SUBCASE("equal taus give identical rows") {
        auto table = build_schedule({.taus = {1, 1, 1}, .T = 33}, layout);
        for (int t = 0; t < 33; ++t) {
            CHECK(table.at(t)[0] == table.at(t)[1]);
            CHECK(table.at(t)[1] == table.at(t)[2]);
        }
    }
    SUBCASE("smaller tau keeps more signal") {
        auto table = build_schedule({.taus = {0.9, 1.2, 1.5}, .T = 256}, layout);
        for (int t = 1; t < 255; ++t) {
            CHECK(table.at(t)[0] > table.at(t)[1]);
            CHECK(table.at(t)[1] > table.at(t)[2]);
            CHECK(snr(table.at(t)[0]) > snr(table.at(t)[2]));
        }
    }
    SUBCASE("T=1 is a single pure-noise step") {
        auto table = build_schedule({.T = 1}, layout);
        CHECK(table.at(0) == GroupAlphas{0, 0, 0});
    }
    SUBCASE("channel expansion follows the layout") {
        auto table = build_schedule({.taus = {0.9, 1.2, 1.5}, .T = 8}, layout);
        auto ch = table.channel_alphas(3, layout);
        REQUIRE(ch.size() == 24);
        CHECK(ch[0] == table.at(3)[0]);
        CHECK(ch[3] == table.at(3)[0]);
        CHECK(ch[4] == table.at(3)[1]);
        CHECK(ch[7] == table.at(3)[1]);
        CHECK(ch[8] == table.at(3)[2]);
        CHECK(ch[23] == table.at(3)[2]);
    }
    CHECK_THROWS_AS(build_schedule({.s = 0.5, .b = 0.4}, layout), Error);
    CHECK_THROWS_AS(build_schedule({.taus = {1, -1, 1}}, layout), Error);
}

TEST_CASE("sdm_alpha: switchable pattern") {
    CHECK(sdm_alpha(3, 4) == GroupAlphas{0, 0, 0});
    CHECK(sdm_alpha(0, 4) == GroupAlphas{1, 1, 0});
    CHECK(sdm_alpha(1, 4) == GroupAlphas{1, 0, 1});
    CHECK(sdm_alpha(2, 4) == GroupAlphas{0, 1, 1});
    CHECK(sdm_alpha(0, 1) == GroupAlphas{0, 0, 0});
    CHECK_THROWS_AS(sdm_alpha(4, 4), Error);
    CHECK_THROWS_AS(sdm_alpha(0, 5), Error);
    for (int T : {4, 7, 10, 13}) {
        for (int t = 0; t < T - 1; ++t) {
            const auto a = sdm_alpha(t, T);
            CHECK(a[0] + a[1] + a[2] == 2.0);  // exactly one group at SNR 0
        }
        for (int start = 0; start + 2 < T - 1; ++start) {
            for (std::size_t g = 0; g < 3; ++g) {
                int zeros = 0;
                for (int t = start; t < start + 3; ++t) zeros += sdm_alpha(t, T)[g] == 0.0;
                CHECK(zeros == 1);
            }
        }
    }
}

TEST_CASE("snr") {
    CHECK(snr(0.0) == 0.0);
    CHECK(snr(0.5) == 1.0);
    CHECK(snr(0.8) == doctest::Approx(4.0));
    CHECK(std::isinf(snr(1.0)));
}

TEST_CASE("export_curves") {
    const auto layout = GroupLayout::standard(4);
    auto rows = export_curves(build_schedule({.T = 2}, layout));
    CHECK(rows.size() == 6);
    auto table = build_schedule({.taus = {0.9, 1.2, 1.5}, .T = 64}, layout);
    rows = export_curves(table);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].t == 0) {
            CHECK(rows[i].alpha_bar == 1.0);
        } else {
            CHECK(rows[i].group == rows[i - 1].group);
            CHECK(rows[i].snr <= rows[i - 1].snr);
        }
    }
    const std::string csv = curves_csv(rows);
    CHECK(csv.rfind("t,group,alpha_bar,snr\n", 0) == 0);
    CHECK(csv.find("0,geometry,1,inf\n") != std::string::npos);
}
