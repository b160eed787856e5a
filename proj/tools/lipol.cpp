// lipol: simulate, fit and analyze polarizability interferometry campaigns.
//
// Exit codes: 0 success, 1 user error (bad arguments, config or files),
// 2 numerical failure (non-convergence, degenerate data).

#include <iostream>

#include <CLI11.hpp>

#include "lipol/lipol.hpp"

namespace {

using namespace lipol;
namespace fs = std::filesystem;

int run_simulate(const pipeline::SimulateOptions& opts) {
    const auto s = pipeline::simulate(opts);
    std::cout << "wrote " << s.recordings << " recordings and " << s.manifest.string()
              << " (seed " << s.seed << ")\n";
    return 0;
}

int run_fit(const pipeline::FitCommandOptions& opts) {
    const auto s = pipeline::fit(opts);
    const auto& recs = s.results.records;
    for (const auto& r : recs) {
        if (!r.fit) std::cerr << "recording " << r.index << ": " << r.error << "\n";
    }
    std::cout << "fitted " << recs.size() - static_cast<std::size_t>(s.results.failures()) << "/"
              << recs.size() << " recordings -> " << s.out.string() << "\n";
    return s.exit_code;
}

int run_analyze(const pipeline::AnalyzeOptions& opts) {
    const auto s = pipeline::analyze(opts);
    for (const auto& w : s.analysis.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << pipeline::summarize_report(s.report);
    std::cout << "report: " << s.report.string() << "\n";
    return 0;
}

int run_check(const fs::path& config, const fs::path& out) {
    const auto cfg = io::load_config(config);
    const auto r = pipeline::check(cfg);
    std::cout << pipeline::format_check(r);
    if (!out.empty()) io::write_text_file(out, io::dump(pipeline::check_to_json(r)));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lithium polarizability atom-interferometry laboratory"};
    app.set_version_flag("--version", std::string(io::tool_version()));
    app.require_subcommand(1);

    pipeline::SimulateOptions sim;
    std::uint64_t seed = 0;
    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic recording campaign");
    simulate->add_option("--config", sim.config, "Configuration file (JSON)")->required()->check(CLI::ExistingFile);
    simulate->add_option("--out", sim.out_dir, "Output directory")->required();
    auto* seed_opt = simulate->add_option("--seed", seed, "Campaign seed (overrides the config)");
    simulate->add_flag("--blind", sim.blind, "Omit truth from the manifest");

    pipeline::FitCommandOptions fit;
    auto* fitc = app.add_subcommand("fit", "Fit every recording listed in a manifest");
    fitc->add_option("manifest", fit.manifest, "Campaign manifest")->required()->check(CLI::ExistingFile);
    fitc->add_option("--out", fit.out, "Fit results file (default: fits.json next to the manifest)");
    fitc->add_option("--parallel", fit.parallel, "Worker threads")->check(CLI::PositiveNumber);

    pipeline::AnalyzeOptions an;
    std::string an_config, an_velocity;
    auto* analyze = app.add_subcommand("analyze", "Extract the polarizability from fit results");
    analyze->add_option("fits", an.fits, "Fit results file")->required()->check(CLI::ExistingFile);
    analyze->add_option("--out", an.out_dir, "Output directory (default: next to the fits)");
    analyze->add_option("--config", an_config, "Configuration overriding the one carried by the fits")
        ->check(CLI::ExistingFile);
    analyze->add_option("--velocity-file", an_velocity, "Velocity measurements (JSON)")
        ->check(CLI::ExistingFile);
    analyze->add_flag("--blind", an.blind, "Omit the truth comparison");

    fs::path check_config, check_out;
    auto* checkc = app.add_subcommand("check", "Print geometry and physics cross-checks");
    checkc->add_option("--config", check_config, "Configuration file (JSON)")->required()->check(CLI::ExistingFile);
    checkc->add_option("--out", check_out, "Also write the values as JSON");

    fs::path report_path;
    auto* report = app.add_subcommand("report", "Summarize and verify a report file");
    report->add_option("report", report_path, "report.json")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*simulate) {
            if (*seed_opt) sim.seed = seed;
            return run_simulate(sim);
        }
        if (*fitc) return run_fit(fit);
        if (*analyze) {
            if (!an_config.empty()) an.config = an_config;
            if (!an_velocity.empty()) an.velocity_file = an_velocity;
            return run_analyze(an);
        }
        if (*checkc) return run_check(check_config, check_out);
        if (*report) {
            std::cout << pipeline::summarize_report(report_path);
            return 0;
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
