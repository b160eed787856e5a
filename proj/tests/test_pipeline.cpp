#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <sys/wait.h>

#include "lipol/pipeline.hpp"

using namespace lipol;
using namespace lipol::pipeline;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;

namespace {

const fs::path ConfigDir = LIPOL_CONFIG_DIR;

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("lipol_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult cli(const std::string& args, const fs::path& scratch) {
    const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
    const std::string cmd = std::string("\"") + LIPOL_CLI_PATH + "\" " + args + " > \"" + out.string() +
                            "\" 2> \"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return {code, io::read_text_file(out), io::read_text_file(err)};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = io::read_text_file(e.path());
    }
    return files;
}

/// Paper-default campaign simulated and fitted once for the whole file.
struct PaperCampaign {
    fs::path dir = fresh_dir("paper");
    SimulateSummary sim = simulate({ConfigDir / "paper.json", dir, 5, false});
    FitSummary fits = fit({sim.manifest, dir / "fits.json", 1});
};

const PaperCampaign& paper() {
    static const PaperCampaign c;
    return c;
}

} // namespace

TEST_CASE("simulate writes recordings and a manifest", "[pipeline]") {
    const auto& c = paper();
    REQUIRE(c.sim.recordings == 44);
    REQUIRE(fs::exists(c.dir / "manifest.json"));
    int csv = 0;
    for (const auto& e : fs::directory_iterator(c.dir / "recordings")) csv += e.path().extension() == ".csv";
    REQUIRE(csv == 44);

    const io::Manifest m = io::load_manifest(c.sim.manifest);
    REQUIRE(m.recordings.size() == 44);
    REQUIRE(m.seed == 5);
    REQUIRE_FALSE(m.blind);
    REQUIRE(m.truth.has_value());
    REQUIRE(m.truth->phase_coefficient == 1.3870e-4);
    REQUIRE(m.recordings[0].truth.has_value());
    REQUIRE(m.tool_version == io::tool_version());
    const auto counts = io::read_recording_csv(c.dir / m.recordings[3].file);
    REQUIRE(counts.size() == 471);
}

TEST_CASE("simulate is deterministic", "[pipeline]") {
    const auto a = fresh_dir("det_a"), b = fresh_dir("det_b"), d = fresh_dir("det_d");
    simulate({ConfigDir / "paper.json", a, 11, false});
    simulate({ConfigDir / "paper.json", b, 11, false});
    simulate({ConfigDir / "paper.json", d, 12, false});
    REQUIRE(snapshot(a) == snapshot(b));
    REQUIRE(snapshot(a) != snapshot(d));
}

TEST_CASE("minimal schedule", "[pipeline]") {
    const auto dir = fresh_dir("minimal");
    const auto s = simulate({ConfigDir / "minimal.json", dir, std::nullopt, false});
    REQUIRE(s.recordings == 3);
    REQUIRE(s.seed == 7);
    const auto f = fit({s.manifest, {}, 2});
    REQUIRE(f.exit_code == 0);
    REQUIRE(f.out == dir / "fits.json");
    REQUIRE(f.results.records[1].fit->fixed_ramp);
}

TEST_CASE("fit follows the reference / fixed-ramp protocol", "[pipeline]") {
    const auto& c = paper();
    const auto& recs = c.fits.results.records;
    REQUIRE(c.fits.exit_code == 0);
    REQUIRE(recs.size() == 44);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        REQUIRE(recs[i].fit.has_value());
        REQUIRE(recs[i].index == static_cast<int>(i) + 1);
        const bool even = recs[i].index % 2 == 0;
        REQUIRE(recs[i].fit->fixed_ramp == even);
        if (even) {
            REQUIRE(recs[i].fit->b == recs[i - 1].fit->b);
            REQUIRE(recs[i].fit->c == recs[i - 1].fit->c);
        }
    }

    SECTION("parallel fitting gives identical output") {
        const auto dir = fresh_dir("parallel");
        fit({c.sim.manifest, dir / "p4.json", 4});
        REQUIRE(io::read_text_file(dir / "p4.json") == io::read_text_file(c.dir / "fits.json"));
    }
}

TEST_CASE("fit isolates corrupted recordings", "[pipeline]") {
    const auto dir = fresh_dir("corrupt");
    const auto s = simulate({ConfigDir / "paper.json", dir, 3, false});
    io::write_text_file(dir / "recordings" / io::recording_file_name(5), "channel,counts\n0,12\n1,x\n");
    io::write_text_file(dir / "recordings" / io::recording_file_name(10), "channel,counts\n0,1\n");
    const auto f = fit({s.manifest, {}, 3});
    REQUIRE(f.exit_code == 1);
    REQUIRE(f.results.failures() == 3); // 5, its dependent 6, and 10
    for (const auto& r : f.results.records) {
        const bool bad = r.index == 5 || r.index == 6 || r.index == 10;
        REQUIRE(r.fit.has_value() == !bad);
    }
    REQUIRE_THAT(f.results.records[4].error, ContainsSubstring("recording_005.csv:3"));
    REQUIRE_THAT(f.results.records[5].error, ContainsSubstring("reference recording 5 failed"));
    REQUIRE_THAT(f.results.records[9].error, ContainsSubstring("expected 471 channels"));

    // The remaining campaign still analyzes, with warnings for the gaps.
    const auto a = analyze({f.out, dir, std::nullopt, std::nullopt, false});
    REQUIRE(a.analysis.table.points.size() == 18);
    REQUIRE(a.analysis.warnings.size() >= 4);
}

TEST_CASE("manifest validation", "[pipeline]") {
    const auto dir = fresh_dir("manifest");
    const auto s = simulate({ConfigDir / "minimal.json", dir, 1, false});
    io::Json m = io::Json::parse(io::read_text_file(s.manifest));

    io::Json empty = m;
    empty["recordings"] = io::Json::array();
    io::write_text_file(dir / "empty.json", io::dump(empty));
    REQUIRE_THROWS_WITH(fit({dir / "empty.json", dir / "f.json", 1}), ContainsSubstring("no recordings"));

    io::Json missing = m;
    missing["recordings"][1]["file"] = "recordings/nope.csv";
    io::write_text_file(dir / "missing.json", io::dump(missing));
    REQUIRE_THROWS_WITH(io::load_manifest(dir / "missing.json"), ContainsSubstring("not found"));

    io::Json short_list = m;
    short_list["recordings"].erase(2);
    io::write_text_file(dir / "short.json", io::dump(short_list));
    REQUIRE_THROWS_WITH(io::load_manifest(dir / "short.json"), ContainsSubstring("schedule has 3 entries"));

    io::Json future = m;
    future["version"] = "3.0";
    io::write_text_file(dir / "future.json", io::dump(future));
    REQUIRE_THROWS_AS(io::load_manifest(dir / "future.json"), FormatError);
}

TEST_CASE("analyze recovers the injected truth", "[pipeline]") {
    const auto& c = paper();
    const auto dir = fresh_dir("analyze");
    const auto a = analyze({c.fits.out, dir, std::nullopt, ConfigDir / "velocities.json", false});
    const auto& r = a.analysis.result;
    REQUIRE(a.analysis.table.points.size() == 21);
    REQUIRE(a.document.contains("truth_comparison"));
    const double alpha_truth = a.document["truth_comparison"]["alpha"]["truth"].get<double>();
    REQUIRE(std::abs(r.alpha.value - alpha_truth) < r.alpha.sigma);
    REQUIRE(r.u.value == Approx(1065.7).margin(0.1));
    REQUIRE(r.u.sigma == Approx(5.8).margin(0.1));
    REQUIRE(std::abs(r.phase_coefficient.value - 1.3870e-4) < 3 * r.phase_coefficient.sigma);
    REQUIRE(std::abs(r.speed_ratio.value - 8.0) < 0.5);
    REQUIRE(a.document["self_consistency"]["relative_difference"].get<double>() <= 1e-12);
    for (const char* f : {"report.json", "phase_shift_vs_voltage.csv", "visibility_vs_voltage.csv",
                          "model_curves.csv"}) {
        REQUIRE(fs::exists(dir / f));
    }

    SECTION("the 260 V point sits near 3 pi") {
        for (const auto& p : a.analysis.table.points) {
            if (p.voltage == 260.0) REQUIRE(p.phase_shift == Approx(9.38).margin(0.15));
        }
    }
    SECTION("rerun is byte-identical") {
        const auto dir2 = fresh_dir("analyze2");
        analyze({c.fits.out, dir2, std::nullopt, ConfigDir / "velocities.json", false});
        REQUIRE(snapshot(dir) == snapshot(dir2));
    }
    SECTION("tampered report fails verification") {
        io::Json doc = io::Json::parse(io::read_text_file(a.report));
        doc["measurement"]["alpha"]["value"] = doc["measurement"]["alpha"]["value"].get<double>() * 1.001;
        io::write_text_file(dir / "tampered.json", io::dump(doc));
        REQUIRE_NOTHROW(summarize_report(a.report));
        REQUIRE_THROWS_AS(summarize_report(dir / "tampered.json"), NumericalError);
    }
}

TEST_CASE("blind campaigns carry no truth", "[pipeline]") {
    const auto dir = fresh_dir("blind");
    const auto s = simulate({ConfigDir / "paper.json", dir, 8, true});
    const io::Json m = io::Json::parse(io::read_text_file(s.manifest));
    REQUIRE_FALSE(m.contains("truth"));
    REQUIRE_FALSE(m["config"].contains("truth"));
    REQUIRE_FALSE(m["config"].contains("beam"));
    REQUIRE_FALSE(m["recordings"][0].contains("truth"));
    const auto f = fit({s.manifest, {}, 2});
    const auto a = analyze({f.out, dir, std::nullopt, std::nullopt, false});
    REQUIRE_FALSE(a.document.contains("truth_comparison"));
    REQUIRE(a.document["blind"].get<bool>());

    // --blind at analysis time hides a known truth too.
    const auto& c = paper();
    const auto d2 = fresh_dir("blind2");
    const auto b = analyze({c.fits.out, d2, std::nullopt, std::nullopt, true});
    REQUIRE_FALSE(b.document.contains("truth_comparison"));
}

TEST_CASE("check reports the physics anchors", "[pipeline]") {
    const auto r = check(io::load_config(ConfigDir / "paper.json"));
    REQUIRE(r.phase_coefficient == Approx(1.387e-4).epsilon(1.5e-3));
    REQUIRE(r.velocity_fraction_change >= 4e-9);
    REQUIRE(r.velocity_fraction_change <= 6e-9);
    REQUIRE(r.supersonic == Approx(1068.0).margin(1.0));
    REQUIRE(r.bragg_angle * 1e6 == Approx(79.6).margin(0.2));
    REQUIRE(r.effective_length * 1e3 == Approx(48.691).margin(1e-3));
    REQUIRE(r.combined_velocity->value == Approx(1065.7).margin(0.1));
    const std::string text = format_check(r);
    REQUIRE_THAT(text, ContainsSubstring("dv/v at 450 V"));
}

TEST_CASE("command line interface", "[pipeline][cli]") {
    const auto dir = fresh_dir("cli");
    const std::string paper_cfg = "\"" + (ConfigDir / "paper.json").string() + "\"";

    SECTION("full run") {
        auto r = cli("simulate --config " + paper_cfg + " --out \"" + (dir / "run").string() + "\" --seed 21", dir);
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring("wrote 44 recordings"));
        r = cli("fit \"" + (dir / "run/manifest.json").string() + "\" --parallel 3", dir);
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring("fitted 44/44"));
        r = cli("analyze \"" + (dir / "run/fits.json").string() + "\" --velocity-file \"" +
                    (ConfigDir / "velocities.json").string() + "\"",
                dir);
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring("alpha"));
        REQUIRE_THAT(r.out, ContainsSubstring("truth comparison"));
        r = cli("report \"" + (dir / "run/report.json").string() + "\"", dir);
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring("budget"));
    }
    SECTION("check") {
        const auto r = cli("check --config " + paper_cfg + " --out \"" + (dir / "check.json").string() + "\"", dir);
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring("phase coefficient         1.38728e-04"));
        const io::Json j = io::Json::parse(io::read_text_file(dir / "check.json"));
        REQUIRE(j["velocity_fraction_change"].get<double>() == Approx(4.9e-9).epsilon(1e-2));
    }
    SECTION("user errors exit with 1") {
        REQUIRE(cli("", dir).code == 1);
        REQUIRE(cli("simulate --out x", dir).code == 1);
        REQUIRE(cli("bogus", dir).code == 1);
        REQUIRE(cli("fit \"" + (dir / "absent.json").string() + "\"", dir).code == 1);
        std::string bad = io::read_text_file(ConfigDir / "paper.json");
        bad.replace(bad.find("\"dwell_time\": 0.36"), 18, "\"dwell_time\": true");
        io::write_text_file(dir / "bad.json", bad);
        const auto r = cli("simulate --config \"" + (dir / "bad.json").string() + "\" --out \"" +
                               (dir / "never").string() + "\"",
                           dir);
        REQUIRE(r.code == 1);
        const auto line = 1 + std::count(bad.begin(), bad.begin() + static_cast<long>(bad.find("\"dwell_time\"")), '\n');
        REQUIRE_THAT(r.err, ContainsSubstring("bad.json:" + std::to_string(line) +
                                              ": recording.dwell_time: expected a number"));
        REQUIRE_FALSE(fs::exists(dir / "never"));
    }
    SECTION("numerical failures exit with 2") {
        std::string flat = io::read_text_file(ConfigDir / "minimal.json");
        flat.replace(flat.find("\"seed\": 7,"), 10, "\"seed\": 7, \"recording\": {\"base_visibility\": 0},");
        io::write_text_file(dir / "flat.json", flat);
        REQUIRE(cli("simulate --config \"" + (dir / "flat.json").string() + "\" --out \"" +
                        (dir / "flat").string() + "\"",
                    dir)
                    .code == 0);
        const auto r = cli("fit \"" + (dir / "flat/manifest.json").string() + "\"", dir);
        REQUIRE(r.code == 2);
        REQUIRE_THAT(r.err, ContainsSubstring("visibility"));
        // Nothing left to analyze.
        REQUIRE(cli("analyze \"" + (dir / "flat/fits.json").string() + "\"", dir).code == 1);
    }
    SECTION("version flag") {
        const auto r = cli("--version", dir);
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring(io::tool_version()));
    }
}
