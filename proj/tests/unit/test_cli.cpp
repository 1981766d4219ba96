#include "support.hpp"

#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "tidmad/io.hpp"
#include "tidmad/random.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <sstream>

using tidmad::test::script;
using tidmad::test::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

struct Result {
    int code;
    std::string out, err;
};

// A small, fast pipeline: 200 kHz, a 3 s science run cut into 30 segments.
class Workspace {
public:
    Workspace()
    {
        std::ofstream(dir_ / "cfg.json") << R"({
  "sample_rate": 200000,
  "workers": 1,
  "generate": {
    "train_seconds": 2, "validation_seconds": 2, "science_seconds": 3,
    "schedule": [ {"frequency_hz": 3000, "amplitude_mv": 20, "duration_s": 1},
                  {"frequency_hz": 7000, "amplitude_mv": 20, "duration_s": 1} ]
  },
  "limit": { "segment_seconds": 0.1, "f_min_hz": 50000, "f_max_hz": 60000, "n_masses": 20, "trials": 100 }
})";
    }

    Result run(std::vector<std::string> args) const
    {
        args.insert(args.end(), {"--config", (dir_ / "cfg.json").string(), "--data-dir", data().string(),
                                 "--output-dir", out().string(), "-q"});
        std::ostringstream o, e;
        const int code = tidmad::cli::run(args, o, e);
        return {code, o.str(), e.str()};
    }

    fs::path data() const { return dir_ / "data"; }
    fs::path out() const { return dir_ / "out"; }
    fs::path path(const std::string& name) const { return dir_ / name; }

private:
    TempDir dir_;
};

}  // namespace

TEST_CASE("help and parse errors")
{
    std::ostringstream o, e;
    CHECK(tidmad::cli::run({"--help"}, o, e) == 0);
    CHECK(o.str().find("generate") != std::string::npos);
    CHECK(tidmad::cli::run({"frobnicate"}, o, e) == 2);
    CHECK(tidmad::cli::run({}, o, e) == 2);
}

TEST_CASE("config overrides by flag, --set and file")
{
    Workspace w;
    auto r = w.run({"generate", "--no-such-key", "3"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--no-such-key") != std::string::npos);
    r = w.run({"generate", "--set", "noise.white_sigma_mv=oops"});
    CHECK(r.code == 2);
    r = w.run({"generate", "--set", "seed=-4"});
    CHECK(r.code == 2);

    auto cfg = tidmad::cli::default_config();
    tidmad::cli::set_config_value(cfg, "noise.white-sigma-mv", "3");
    CHECK(cfg["noise"]["white_sigma_mv"] == 3);
    tidmad::cli::set_config_value(cfg, "denoise.kind", "sg");
    CHECK(cfg["denoise"]["kind"] == "sg");
    CHECK_THROWS_AS(tidmad::cli::set_config_value(cfg, "noise.nope", "1"), tidmad::UsageError);
    const auto h1 = tidmad::cli::config_hash(cfg);
    tidmad::cli::set_config_value(cfg, "seed", "2");
    CHECK(tidmad::cli::config_hash(cfg) != h1);
    CHECK(h1.size() == 16);
}

TEST_CASE("big-data guard")
{
    Workspace w;
    auto r = w.run({"generate", "--set", "big_data_gigasamples=0.000001"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--big-data") != std::string::npos);
    CHECK_FALSE(fs::exists(w.data() / "train.tsd"));
    r = w.run({"generate", "--set", "big_data_gigasamples=0.000001", "--big-data"});
    CHECK(r.code == 0);
}

TEST_CASE("missing and corrupt inputs map to exit code 3")
{
    Workspace w;
    auto r = w.run({"score", "--input", w.path("absent.tsd").string()});
    CHECK(r.code == 3);
    {
        std::ofstream(w.path("junk.tsd")) << "not a container at all";
    }
    r = w.run({"limit", "--input", w.path("junk.tsd").string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("junk.tsd") != std::string::npos);
}

TEST_CASE("numerical failure maps to exit code 4")
{
    Workspace w;
    // A dead SQUID channel next to a live injected tone: the SQUID SNR has
    // no noise reference at all.
    const tidmad::SampleSeries zero{std::vector<std::int8_t>(400000, 0), 200000.0};
    tidmad::SampleSeries tone = zero;
    tidmad::CounterRng rng(5);
    for (std::size_t i = 0; i < tone.samples.size(); ++i)
        tone.samples[i] = static_cast<std::int8_t>(std::lround(40.0 * std::sin(0.05 * static_cast<double>(i))
                                                               + 4.0 * (rng.uniform() - 0.5)));
    const std::vector<tidmad::SampleSeries> chans{zero, tone};
    tidmad::io::write_container(w.path("zero.tsd"), chans);
    const auto r = w.run({"score", "--input", w.path("zero.tsd").string()});
    CHECK(r.code == 4);
}

TEST_CASE("generate is reproducible, guarded and documented")
{
    Workspace w;
    auto r = w.run({"generate"});
    REQUIRE(r.code == 0);
    for (const char* f : {"train.tsd", "validation.tsd", "science.tsd", "manifest.json"}) {
        CHECK(fs::exists(w.data() / f));
        CHECK(fs::exists(w.data() / (std::string(f) + ".prov.json")));
    }
    const auto prov = nlohmann::json::parse(slurp(w.data() / "train.tsd.prov.json"));
    CHECK(prov.contains("config_hash"));
    CHECK(prov["seeds"].contains("train"));
    CHECK(prov["command"].get<std::string>().rfind("generate", 0) == 0);
    const auto science = slurp(w.data() / "science.tsd");
    const auto train = slurp(w.data() / "train.tsd");

    r = w.run({"generate"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--force") != std::string::npos);

    r = w.run({"generate", "--force"});
    REQUIRE(r.code == 0);
    CHECK(slurp(w.data() / "science.tsd") == science);
    CHECK(slurp(w.data() / "train.tsd") == train);

    r = w.run({"generate", "--force", "--seed", "2"});
    REQUIRE(r.code == 0);
    CHECK(slurp(w.data() / "science.tsd") != science);
}

TEST_CASE("score, robustness grid and exports")
{
    Workspace w;
    REQUIRE(w.run({"generate", "--set", "generate.science_seconds=0"}).code == 0);
    auto r = w.run({"score", "--input", (w.data() / "validation.tsd").string(), "--robustness-grid",
                    "--set", "score.robustness.amplitudes=[0,1]", "--set", "score.robustness.sigmas_mv=[1,2]"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("fine score:   1.0000") != std::string::npos);
    CHECK(fs::exists(w.out() / "score_fine.json"));
    CHECK(fs::exists(w.out() / "score_coarse.json.prov.json"));
    const auto grid = nlohmann::json::parse(slurp(w.out() / "robustness_grid.json"));
    CHECK(grid["score"].size() == 2);

    r = w.run({"export", "--score-grid", (w.out() / "robustness_grid.json").string(), "--output",
               w.path("grid.csv").string()});
    REQUIRE(r.code == 0);
    CHECK(slurp(w.path("grid.csv")).rfind("amplitude,sigma_1,sigma_2\n", 0) == 0);
    r = w.run({"export", "--score", (w.out() / "score_fine.json").string(), "--output", w.path("s.csv").string()});
    CHECK(r.code == 0);
    r = w.run({"export", "--score", "a", "--limit", "b", "--output", w.path("x.csv").string()});
    CHECK(r.code == 2);
    r = w.run({"export", "--score-grid", (w.out() / "robustness_grid.json").string(), "--field", "nope",
               "--output", w.path("y.csv").string()});
    CHECK(r.code == 2);
}

TEST_CASE("limit pipeline: refusal, saved PSD, identity denoiser, band")
{
    Workspace w;
    REQUIRE(w.run({"generate", "--set", "generate.train_seconds=0", "--set", "generate.validation_seconds=0"}).code
            == 0);
    const auto science = (w.data() / "science.tsd").string();

    // Ten-second segments leave only 0 of the 30 needed.
    auto r = w.run({"limit", "--input", science, "--set", "limit.segment_seconds=10"});
    CHECK(r.code == 2);
    CHECK(r.err.find("300 s") != std::string::npos);

    r = w.run({"limit", "--input", science, "--save-psd"});
    REQUIRE(r.code == 0);
    const auto curve = slurp(w.out() / "limit.csv");
    CHECK(std::count(curve.begin(), curve.end(), '\n') == 21);
    const auto js = nlohmann::json::parse(slurp(w.out() / "limit.json"));
    CHECK(js["points"].size() == 20);
    CHECK(fs::exists(w.out() / "science.psd"));

    r = w.run({"limit", "--psd", (w.out() / "science.psd").string(), "--force"});
    REQUIRE(r.code == 0);
    CHECK(slurp(w.out() / "limit.csv") == curve);

    // A no-op external denoiser must reproduce the curve exactly.
    const std::string cmd = std::string("[\"") + TIDMAD_PYTHON + "\",\"" + script("identity.py") + "\"]";
    r = w.run({"denoise", "--input", science, "--output", w.path("same.tsd").string(), "--set",
               "denoise.kind=external", "--set", "denoise.command=" + cmd, "--set", "denoise.segment_seconds=1"});
    REQUIRE(r.code == 0);
    r = w.run({"limit", "--input", w.path("same.tsd").string(), "--force"});
    REQUIRE(r.code == 0);
    CHECK(slurp(w.out() / "limit.csv") == curve);

    r = w.run({"band", "--psd", (w.out() / "science.psd").string()});
    REQUIRE(r.code == 0);
    const auto band = nlohmann::json::parse(slurp(w.out() / "band.json"));
    CHECK(band["n_trials"] == 100);
    CHECK(band["points"].size() == 20);
    CHECK(fs::exists(w.out() / "band.csv.prov.json"));

    r = w.run({"export", "--limit", (w.out() / "limit.json").string(), "--output", w.path("l.csv").string()});
    CHECK(r.code == 0);
    r = w.run({"export", "--psd", (w.out() / "science.psd").string(), "--fmin", "1000", "--fmax", "1100", "--output",
               w.path("p.csv").string()});
    REQUIRE(r.code == 0);
    const auto p = slurp(w.path("p.csv"));
    CHECK(std::count(p.begin(), p.end(), '\n') == 12);  // header + 11 bins at 10 Hz
}

TEST_CASE("external denoiser failures surface as data errors")
{
    Workspace w;
    REQUIRE(w.run({"generate", "--set", "generate.train_seconds=0", "--set", "generate.validation_seconds=0"}).code
            == 0);
    const std::string cmd = std::string("[\"") + TIDMAD_PYTHON + "\",\"" + script("fail.py") + "\"]";
    const auto r = w.run({"denoise", "--input", (w.data() / "science.tsd").string(), "--set", "denoise.kind=external",
                          "--set", "denoise.command=" + cmd});
    CHECK(r.code == 3);
    CHECK_FALSE(r.err.empty());
}
