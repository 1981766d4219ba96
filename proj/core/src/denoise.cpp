#include "tidmad/denoise.hpp"

#include "tidmad/io.hpp"

#include <Eigen/Dense>

#include <cerrno>
#include <csignal>
#include <cstdlib>
#include <cstring>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

namespace tidmad::denoise {

const char* to_string(DenoiserSpec::Kind k) noexcept
{
    switch (k) {
    case DenoiserSpec::Kind::None: return "none";
    case DenoiserSpec::Kind::MovingAverage: return "moving_average";
    case DenoiserSpec::Kind::SavitzkyGolay: return "savitzky_golay";
    case DenoiserSpec::Kind::External: return "external";
    }
    return "?";
}

DenoiserSpec::Kind parse_kind(const std::string& name)
{
    if (name == "none") return DenoiserSpec::Kind::None;
    if (name == "moving_average" || name == "ma") return DenoiserSpec::Kind::MovingAverage;
    if (name == "savitzky_golay" || name == "sg") return DenoiserSpec::Kind::SavitzkyGolay;
    if (name == "external") return DenoiserSpec::Kind::External;
    throw UsageError("unknown denoiser '" + name + "' (expected none, moving_average, savitzky_golay or external)");
}

namespace {

void check_sg(std::size_t window, int order)
{
    if (window < 2) throw UsageError("Savitzky-Golay window must be >= 2");
    if (window % 2 == 0) {
        std::ostringstream os;
        os << "Savitzky-Golay window must be odd; got " << window << ", use " << window - 1 << " or " << window + 1;
        throw UsageError(os.str());
    }
    if (order < 0 || static_cast<std::size_t>(order) >= window)
        throw UsageError("Savitzky-Golay order must satisfy 0 <= order < window");
}

}  // namespace

void DenoiserSpec::validate() const
{
    switch (kind) {
    case Kind::None: break;
    case Kind::MovingAverage:
        if (window < 2) throw UsageError("moving-average window must be >= 2");
        break;
    case Kind::SavitzkyGolay: check_sg(window, order); break;
    case Kind::External:
        if (external.argv.empty() || external.argv.front().empty()) throw UsageError("external denoiser: empty command");
        if (external.timeout.count() <= 0) throw UsageError("external denoiser: timeout must be positive");
        break;
    }
}

std::string DenoiserSpec::describe() const
{
    std::ostringstream os;
    os << to_string(kind);
    if (kind == Kind::MovingAverage) os << "(window=" << window << ")";
    if (kind == Kind::SavitzkyGolay) os << "(window=" << window << ", order=" << order << ")";
    if (kind == Kind::External) {
        os << "(";
        for (std::size_t i = 0; i < external.argv.size(); ++i) os << (i ? " " : "") << external.argv[i];
        os << ")";
    }
    return os.str();
}

// ---------------------------------------------------------------------------

std::vector<double> moving_average(std::span<const double> x, std::size_t window)
{
    if (window < 2) throw UsageError("moving-average window must be >= 2");
    const std::size_t n = x.size();
    if (window > n) {
        std::ostringstream os;
        os << "moving-average window " << window << " exceeds series length " << n;
        throw UsageError(os.str());
    }
    const std::ptrdiff_t back = static_cast<std::ptrdiff_t>(window / 2);
    const std::ptrdiff_t fwd = static_cast<std::ptrdiff_t>((window + 1) / 2) - 1;
    const std::ptrdiff_t sn = static_cast<std::ptrdiff_t>(n);
    std::vector<double> y(n);

    // Running sum, refreshed from scratch every 1024 outputs to bound drift.
    double sum = 0.0;
    std::ptrdiff_t lo = 0, hi = -1;  // current summed range, inclusive
    for (std::ptrdiff_t t = 0; t < sn; ++t) {
        const std::ptrdiff_t a = std::max<std::ptrdiff_t>(0, t - back);
        const std::ptrdiff_t b = std::min<std::ptrdiff_t>(sn - 1, t + fwd);
        if ((t & 1023) == 0) {
            sum = 0.0;
            for (std::ptrdiff_t k = a; k <= b; ++k) sum += x[k];
        } else {
            while (hi < b) sum += x[++hi];
            while (lo < a) sum -= x[lo++];
        }
        lo = a;
        hi = b;
        y[t] = sum / static_cast<double>(b - a + 1);
    }
    return y;
}

FloatSeries moving_average(const FloatSeries& x, std::size_t window)
{
    x.validate();
    return FloatSeries{moving_average(x.samples, window), x.sample_rate};
}

FloatSeries moving_average(const SampleSeries& x, std::size_t window)
{
    x.validate();
    return FloatSeries{moving_average(x.to_millivolts(), window), x.sample_rate};
}

std::vector<double> savitzky_golay_coefficients(std::size_t window, int order)
{
    check_sg(window, order);
    using Mat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    using Vec = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
    const int w = static_cast<int>(window);
    const int m = w / 2;
    const int p = order + 1;
    // Abscissa scaled to [-1, 1] keeps the normal equations well conditioned.
    Mat v(w, p);
    for (int i = 0; i < w; ++i) {
        const long double u = static_cast<long double>(i - m) / static_cast<long double>(m);
        long double pw = 1.0L;
        for (int j = 0; j < p; ++j) {
            v(i, j) = pw;
            pw *= u;
        }
    }
    const Mat normal = v.transpose() * v;
    Vec e0 = Vec::Zero(p);
    e0(0) = 1.0L;
    const Vec y = normal.ldlt().solve(e0);
    const Vec c = v * y;
    std::vector<double> out(window);
    for (int i = 0; i < w; ++i) out[i] = static_cast<double>(c(i));
    return out;
}

namespace {

std::vector<double> apply_symmetric(std::span<const double> x, const std::vector<double>& c)
{
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(c.size() / 2);
    if (static_cast<std::size_t>(n) < c.size()) {
        std::ostringstream os;
        os << "Savitzky-Golay window " << c.size() << " exceeds series length " << n;
        throw UsageError(os.str());
    }
    auto at = [&](std::ptrdiff_t i) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
        return x[i];
    };
    std::vector<double> y(x.size());
    for (std::ptrdiff_t t = 0; t < n; ++t) {
        double s = 0.0;
        if (t >= m && t + m < n) {
            const double* base = x.data() + (t - m);
            for (std::size_t k = 0; k < c.size(); ++k) s += c[k] * base[k];
        } else {
            for (std::ptrdiff_t k = -m; k <= m; ++k) s += c[k + m] * at(t + k);
        }
        y[t] = s;
    }
    return y;
}

}  // namespace

std::vector<double> savitzky_golay(std::span<const double> x, std::size_t window, int order)
{
    return apply_symmetric(x, savitzky_golay_coefficients(window, order));
}

FloatSeries savitzky_golay(const FloatSeries& x, std::size_t window, int order)
{
    x.validate();
    return FloatSeries{savitzky_golay(x.samples, window, order), x.sample_rate};
}

FloatSeries savitzky_golay(const SampleSeries& x, std::size_t window, int order)
{
    x.validate();
    return FloatSeries{savitzky_golay(x.to_millivolts(), window, order), x.sample_rate};
}

// ---------------------------------------------------------------------------

std::filesystem::path temp_root()
{
    if (const char* env = std::getenv("TIDMAD_TMPDIR"); env && *env) return env;
    return std::filesystem::temp_directory_path();
}

namespace {

bool executable_exists(const std::string& prog)
{
    if (prog.find('/') != std::string::npos) return ::access(prog.c_str(), X_OK) == 0;
    const char* path = std::getenv("PATH");
    if (!path) return false;
    std::stringstream ss(path);
    std::string dir;
    while (std::getline(ss, dir, ':')) {
        if (dir.empty()) dir = ".";
        if (::access((dir + "/" + prog).c_str(), X_OK) == 0) return true;
    }
    return false;
}

// Scratch directory removed on scope exit.
struct ScratchDir {
    std::filesystem::path path;
    ScratchDir()
    {
        auto tmpl = (temp_root() / "tidmad-ext-XXXXXX").string();
        std::vector<char> buf(tmpl.begin(), tmpl.end());
        buf.push_back('\0');
        if (!::mkdtemp(buf.data()))
            throw DataError("cannot create temp directory under '" + temp_root().string() + "': " + std::strerror(errno));
        path = buf.data();
    }
    ~ScratchDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

std::string command_text(const ExternalCommand& cmd)
{
    std::string s;
    for (const auto& a : cmd.argv) s += (s.empty() ? "" : " ") + a;
    return s;
}

void run_process(const ExternalCommand& cmd, const std::filesystem::path& in, const std::filesystem::path& out)
{
    if (cmd.argv.empty()) throw UsageError("external denoiser: empty command");
    if (!executable_exists(cmd.argv.front()))
        throw ExternalError(ExternalError::Kind::NotFound, "external denoiser: command not found: " + cmd.argv.front());

    std::vector<std::string> args = cmd.argv;
    args.push_back(in.string());
    args.push_back(out.string());
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);

    const pid_t pid = ::fork();
    if (pid < 0) throw DataError(std::string("external denoiser: fork failed: ") + std::strerror(errno));
    if (pid == 0) {
        ::setpgid(0, 0);
        ::execvp(argv[0], argv.data());
        ::_exit(127);
    }
    const auto deadline = std::chrono::steady_clock::now() + cmd.timeout;
    int status = 0;
    auto delay = std::chrono::milliseconds(1);
    for (;;) {
        const pid_t r = ::waitpid(pid, &status, WNOHANG);
        if (r == pid) break;
        if (r < 0 && errno != EINTR) throw DataError(std::string("external denoiser: waitpid failed: ") + std::strerror(errno));
        if (std::chrono::steady_clock::now() >= deadline) {
            ::kill(-pid, SIGKILL);
            ::kill(pid, SIGKILL);
            ::waitpid(pid, &status, 0);
            std::ostringstream os;
            os << "external denoiser timed out after " << cmd.timeout.count() << " ms: " << command_text(cmd);
            throw ExternalError(ExternalError::Kind::Timeout, os.str());
        }
        std::this_thread::sleep_for(delay);
        delay = std::min(delay * 2, std::chrono::milliseconds(20));
    }
    if (WIFSIGNALED(status)) {
        std::ostringstream os;
        os << "external denoiser killed by signal " << WTERMSIG(status) << ": " << command_text(cmd);
        throw ExternalError(ExternalError::Kind::ExitStatus, os.str());
    }
    if (WEXITSTATUS(status) != 0) {
        std::ostringstream os;
        os << "external denoiser exited with status " << WEXITSTATUS(status) << ": " << command_text(cmd);
        throw ExternalError(ExternalError::Kind::ExitStatus, os.str());
    }
}

FloatSeries read_back(const std::filesystem::path& out, std::size_t expected, double rate)
{
    if (!std::filesystem::exists(out))
        throw ExternalError(ExternalError::Kind::Protocol, "external denoiser produced no output file");
    io::ContainerReader reader(out);
    if (reader.header().n_channels() != 1)
        throw ExternalError(ExternalError::Kind::Protocol, "external denoiser output must have exactly one channel");
    const auto len = reader.length(0);
    if (len != expected) {
        std::ostringstream os;
        os << "external denoiser length mismatch: input has " << expected << " samples, output has " << len;
        throw ExternalError(ExternalError::Kind::LengthMismatch, os.str());
    }
    if (reader.sample_rate() != rate) {
        std::ostringstream os;
        os << "external denoiser sample-rate mismatch: input " << rate << " Hz, output " << reader.sample_rate() << " Hz";
        throw ExternalError(ExternalError::Kind::Protocol, os.str());
    }
    FloatSeries y;
    y.sample_rate = rate;
    y.samples.resize(len);
    reader.read_millivolts(0, 0, y.samples);
    y.validate();
    return y;
}

}  // namespace

FloatSeries run_external(const SampleSeries& x, const ExternalCommand& cmd)
{
    x.validate();
    ScratchDir dir;
    const auto in = dir.path / "input.tsd";
    const auto out = dir.path / "output.tsd";
    io::write_container(in, std::span<const SampleSeries>(&x, 1));
    run_process(cmd, in, out);
    return read_back(out, x.size(), x.sample_rate);
}

FloatSeries run_external(const FloatSeries& x, const ExternalCommand& cmd)
{
    x.validate();
    ScratchDir dir;
    const auto in = dir.path / "input.tsd";
    const auto out = dir.path / "output.tsd";
    io::write_container(in, std::span<const FloatSeries>(&x, 1));
    run_process(cmd, in, out);
    return read_back(out, x.size(), x.sample_rate);
}

// ---------------------------------------------------------------------------

Denoiser::Denoiser(DenoiserSpec spec) : spec_(std::move(spec))
{
    spec_.validate();
    if (spec_.kind == DenoiserSpec::Kind::SavitzkyGolay) sg_ = savitzky_golay_coefficients(spec_.window, spec_.order);
}

std::vector<double> Denoiser::apply(const SampleSeries& x) const
{
    if (spec_.kind == DenoiserSpec::Kind::External) return run_external(x, spec_.external).samples;
    return apply(x.to_millivolts(), x.sample_rate);
}

std::vector<double> Denoiser::apply(std::span<const double> mv, double sample_rate) const
{
    switch (spec_.kind) {
    case DenoiserSpec::Kind::None: return {mv.begin(), mv.end()};
    case DenoiserSpec::Kind::MovingAverage: return moving_average(mv, spec_.window);
    case DenoiserSpec::Kind::SavitzkyGolay: return apply_symmetric(mv, sg_);
    case DenoiserSpec::Kind::External:
        return run_external(FloatSeries{{mv.begin(), mv.end()}, sample_rate}, spec_.external).samples;
    }
    return {};
}

}  // namespace tidmad::denoise
