#include "taat/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "taat/errors.hpp"
#include "taat/rng.hpp"

namespace fs = std::filesystem;

namespace taat {

// ---------------------------------------------------------------------------
// Degradation schedule

namespace {

struct DegradationRange {
    enum class Kind { rgb_blackout, tir_crossover } kind;
    int first = 0, last = 0;  // inclusive
};

std::vector<DegradationRange> parse_scheme(const std::string& scheme) {
    std::vector<DegradationRange> out;
    if (scheme == "clean") return out;
    std::size_t pos = 0;
    while (pos < scheme.size()) {
        auto next = scheme.find('+', pos);
        if (next == std::string::npos) next = scheme.size();
        const std::string part = scheme.substr(pos, next - pos);
        DegradationRange r;
        char name[32] = {0};
        if (std::sscanf(part.c_str(), "%31[a-z_](%d,%d)", name, &r.first, &r.last) != 3)
            throw ConfigError("cannot parse degradation scheme: " + part);
        const std::string n = name;
        if (n == "rgb_blackout")
            r.kind = DegradationRange::Kind::rgb_blackout;
        else if (n == "tir_crossover")
            r.kind = DegradationRange::Kind::tir_crossover;
        else
            throw ConfigError("unknown degradation scheme: " + n);
        if (r.first < 0 || r.last < r.first)
            throw ConfigError("invalid degradation range in: " + part);
        out.push_back(r);
        pos = next + 1;
    }
    return out;
}

bool active(const std::vector<DegradationRange>& ranges, DegradationRange::Kind kind,
            int frame) {
    for (const auto& r : ranges)
        if (r.kind == kind && frame >= r.first && frame <= r.last) return true;
    return false;
}

// ---------------------------------------------------------------------------
// Scene rendering

struct MovingRect {
    float cx, cy, w, h;
    float vx, vy;

    void step(int img_w, int img_h) {
        cx += vx;
        cy += vy;
        const float mx = 0.5f * w + 2.0f, my = 0.5f * h + 2.0f;
        if (cx < mx) { cx = mx; vx = -vx; }
        if (cx > img_w - mx) { cx = static_cast<float>(img_w) - mx; vx = -vx; }
        if (cy < my) { cy = my; vy = -vy; }
        if (cy > img_h - my) { cy = static_cast<float>(img_h) - my; vy = -vy; }
    }
};

struct Scene {
    int w = 0, h = 0;
    std::vector<float> bg_rgb;        // 3 planes
    std::vector<float> bg_tir;        // 1 plane
    std::vector<float> target_rgb;    // 3 planes of target texture (tw x th)
    std::vector<float> target_tir;
    int tw = 0, th = 0;
    MovingRect target;
    std::vector<MovingRect> distractors;
    float tir_background_level = 60.0f;
};

Scene build_scene(const GenSpec& spec, Rng& rng) {
    Scene s;
    s.w = spec.width;
    s.h = spec.height;

    const int plane = s.w * s.h;
    s.bg_rgb.resize(static_cast<std::size_t>(plane) * 3);
    s.bg_tir.resize(static_cast<std::size_t>(plane));
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < plane; ++i)
            s.bg_rgb[static_cast<std::size_t>(c) * plane + i] =
                90.0f + 25.0f * static_cast<float>(rng.normal());
    for (int i = 0; i < plane; ++i)
        s.bg_tir[i] = s.tir_background_level + 8.0f * static_cast<float>(rng.normal());

    s.tw = static_cast<int>(rng.uniform_int(24, 40));
    s.th = static_cast<int>(rng.uniform_int(24, 40));
    s.target_rgb.resize(static_cast<std::size_t>(s.tw) * s.th * 3);
    s.target_tir.resize(static_cast<std::size_t>(s.tw) * s.th);
    // blocky high-contrast texture so correlation has structure to latch on
    const int block = 4;
    for (int by = 0; by < (s.th + block - 1) / block; ++by) {
        for (int bx = 0; bx < (s.tw + block - 1) / block; ++bx) {
            float col[3] = {static_cast<float>(rng.uniform(130.0, 255.0)),
                            static_cast<float>(rng.uniform(130.0, 255.0)),
                            static_cast<float>(rng.uniform(130.0, 255.0))};
            const float tir_v = 185.0f + 25.0f * static_cast<float>(rng.uniform());
            for (int y = by * block; y < std::min(s.th, (by + 1) * block); ++y) {
                for (int x = bx * block; x < std::min(s.tw, (bx + 1) * block); ++x) {
                    for (int c = 0; c < 3; ++c)
                        s.target_rgb[(static_cast<std::size_t>(c) * s.th + y) * s.tw + x] = col[c];
                    s.target_tir[static_cast<std::size_t>(y) * s.tw + x] = tir_v;
                }
            }
        }
    }

    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    s.target = {static_cast<float>(rng.uniform(0.3, 0.7)) * s.w,
                static_cast<float>(rng.uniform(0.3, 0.7)) * s.h,
                static_cast<float>(s.tw), static_cast<float>(s.th),
                spec.speed * static_cast<float>(std::cos(angle)),
                spec.speed * static_cast<float>(std::sin(angle))};

    for (int d = 0; d < 2; ++d) {
        const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        MovingRect m{static_cast<float>(rng.uniform(0.15, 0.85)) * s.w,
                     static_cast<float>(rng.uniform(0.15, 0.85)) * s.h,
                     static_cast<float>(rng.uniform_int(20, 36)),
                     static_cast<float>(rng.uniform_int(20, 36)),
                     1.0f * static_cast<float>(std::cos(a)),
                     1.0f * static_cast<float>(std::sin(a))};
        s.distractors.push_back(m);
    }
    return s;
}

unsigned char quantize(float v) {
    const float r = std::round(v);
    return static_cast<unsigned char>(std::clamp(r, 0.0f, 255.0f));
}

// Renders one frame pair into u8 planar buffers.
void render_frame(const Scene& s, bool blackout, bool crossover, Rng& noise_rng,
                  std::vector<unsigned char>& rgb, std::vector<unsigned char>& tir) {
    const int plane = s.w * s.h;
    std::vector<float> frgb(s.bg_rgb);
    std::vector<float> ftir(s.bg_tir);

    auto paint = [&](const MovingRect& r, bool is_target, bool is_distractor) {
        const int x0 = static_cast<int>(std::lround(r.cx - 0.5f * r.w));
        const int y0 = static_cast<int>(std::lround(r.cy - 0.5f * r.h));
        for (int y = std::max(0, y0); y < std::min(s.h, y0 + static_cast<int>(r.h)); ++y) {
            for (int x = std::max(0, x0); x < std::min(s.w, x0 + static_cast<int>(r.w)); ++x) {
                const int ty = y - y0, tx = x - x0;
                if (is_target) {
                    for (int c = 0; c < 3; ++c)
                        frgb[static_cast<std::size_t>(c) * plane + y * s.w + x] =
                            s.target_rgb[(static_cast<std::size_t>(c) * s.th +
                                          std::min(ty, s.th - 1)) *
                                             s.tw +
                                         std::min(tx, s.tw - 1)];
                    ftir[static_cast<std::size_t>(y) * s.w + x] =
                        crossover ? s.tir_background_level
                                  : s.target_tir[static_cast<std::size_t>(std::min(ty, s.th - 1)) *
                                                     s.tw +
                                                 std::min(tx, s.tw - 1)];
                } else if (is_distractor) {
                    // visually bland, thermally bright
                    for (int c = 0; c < 3; ++c)
                        frgb[static_cast<std::size_t>(c) * plane + y * s.w + x] = 98.0f;
                    ftir[static_cast<std::size_t>(y) * s.w + x] = 205.0f;
                }
            }
        }
    };

    for (const auto& d : s.distractors) paint(d, false, true);
    paint(s.target, true, false);

    rgb.resize(static_cast<std::size_t>(plane) * 3);
    tir.resize(static_cast<std::size_t>(plane));
    const float rgb_scale = blackout ? 0.05f : 1.0f;
    for (std::size_t i = 0; i < frgb.size(); ++i) {
        const float n = 3.0f * static_cast<float>(noise_rng.normal());
        rgb[i] = quantize((frgb[i] + n) * rgb_scale);
    }
    for (std::size_t i = 0; i < ftir.size(); ++i) {
        const float n = 3.0f * static_cast<float>(noise_rng.normal());
        tir[i] = quantize(ftir[i] + n);
    }
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write file: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("short write: " + path.string());
}

}  // namespace

SequenceManifest generate_sequence(const GenSpec& spec, const std::string& out_dir) {
    if (spec.frames < 10) throw ConfigError("sequence needs at least 10 frames");
    if (spec.width < 64 || spec.height < 64) throw ConfigError("image dims too small");
    const auto ranges = parse_scheme(spec.scheme);

    Rng rng(spec.seed);
    Scene scene = build_scene(spec, rng);

    const fs::path base = fs::path(out_dir) / spec.name;
    fs::create_directories(base / "rgb");
    fs::create_directories(base / "tir");

    SequenceManifest m;
    m.name = spec.name;
    m.frames = spec.frames;
    m.width = spec.width;
    m.height = spec.height;
    m.scheme = spec.scheme;
    m.dir = base.string();

    std::vector<unsigned char> rgb, tir;
    for (int t = 0; t < spec.frames; ++t) {
        if (t > 0) {
            scene.target.step(spec.width, spec.height);
            for (auto& d : scene.distractors) d.step(spec.width, spec.height);
        }
        const bool blackout = active(ranges, DegradationRange::Kind::rgb_blackout, t);
        const bool crossover = active(ranges, DegradationRange::Kind::tir_crossover, t);
        render_frame(scene, blackout, crossover, rng, rgb, tir);

        char fname[32];
        std::snprintf(fname, sizeof(fname), "%06d.raw", t);
        write_bytes(base / "rgb" / fname, rgb);
        write_bytes(base / "tir" / fname, tir);

        FrameEntry e;
        e.rgb_path = std::string("rgb/") + fname;
        e.tir_path = std::string("tir/") + fname;
        e.gt = {scene.target.cx, scene.target.cy, scene.target.w, scene.target.h};
        m.entries.push_back(e);
    }

    save_manifest(m, (base / "manifest.txt").string());
    return m;
}

void save_manifest(const SequenceManifest& m, const std::string& path) {
    std::string out = "taat-manifest v1\n";
    out += "name: " + m.name + "\n";
    out += "frames: " + std::to_string(m.frames) + "\n";
    out += "width: " + std::to_string(m.width) + "\n";
    out += "height: " + std::to_string(m.height) + "\n";
    out += "scheme: " + m.scheme + "\n";
    char line[256];
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const FrameEntry& e = m.entries[i];
        std::snprintf(line, sizeof(line), "frame: %zu %s %s %.4f %.4f %.4f %.4f\n", i,
                      e.rgb_path.c_str(), e.tir_path.c_str(),
                      static_cast<double>(e.gt.x0()), static_cast<double>(e.gt.y0()),
                      static_cast<double>(e.gt.w), static_cast<double>(e.gt.h));
        out += line;
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write manifest: " + path);
    f << out;
}

SequenceManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(f, line) || line != "taat-manifest v1")
        throw FormatError("bad manifest header in " + path);

    SequenceManifest m;
    m.dir = fs::path(path).parent_path().string();
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "name:") {
            ls >> m.name;
        } else if (key == "frames:") {
            ls >> m.frames;
        } else if (key == "width:") {
            ls >> m.width;
        } else if (key == "height:") {
            ls >> m.height;
        } else if (key == "scheme:") {
            ls >> m.scheme;
        } else if (key == "frame:") {
            std::size_t idx = 0;
            FrameEntry e;
            float x, y, w, h;
            if (!(ls >> idx >> e.rgb_path >> e.tir_path >> x >> y >> w >> h))
                throw FormatError("bad frame line in manifest: " + line);
            e.gt = BoundingBox::from_corner(x, y, w, h);
            m.entries.push_back(e);
        } else {
            throw FormatError("unknown manifest key: " + key);
        }
    }
    if (m.frames < 2) throw FormatError("manifest needs at least 2 frames: " + path);
    if (static_cast<int>(m.entries.size()) != m.frames)
        throw FormatError("manifest frame count mismatch in " + path);

    const std::size_t rgb_len = static_cast<std::size_t>(m.width) * m.height * 3;
    const std::size_t tir_len = static_cast<std::size_t>(m.width) * m.height;
    for (const FrameEntry& e : m.entries) {
        for (const auto& [rel, want] :
             {std::pair{e.rgb_path, rgb_len}, std::pair{e.tir_path, tir_len}}) {
            const fs::path p = fs::path(m.dir) / rel;
            std::error_code ec;
            const auto size = fs::file_size(p, ec);
            if (ec) throw FormatError("manifest references missing file: " + p.string());
            if (size != want)
                throw FormatError("file " + p.string() + " has " + std::to_string(size) +
                                  " bytes, expected " + std::to_string(want));
        }
    }
    return m;
}

FramePair load_frame(const SequenceManifest& m, int idx) {
    if (idx < 0 || idx >= m.frames) throw ParameterError("frame index out of range");
    const FrameEntry& e = m.entries[static_cast<std::size_t>(idx)];
    const int plane = m.width * m.height;

    auto read_planes = [&](const std::string& rel, int channels) {
        const fs::path p = fs::path(m.dir) / rel;
        std::ifstream f(p, std::ios::binary);
        if (!f) throw FormatError("cannot open frame file: " + p.string());
        std::vector<unsigned char> bytes(static_cast<std::size_t>(plane) * channels);
        f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
            throw FormatError("truncated frame file: " + p.string());
        Tensor t(1, channels, m.height, m.width);
        for (std::size_t i = 0; i < bytes.size(); ++i)
            t.v[i] = static_cast<float>(bytes[i]) / 255.0f;
        return t;
    };

    FramePair fp;
    fp.rgb = read_planes(e.rgb_path, 3);
    fp.tir = read_planes(e.tir_path, 1);
    return fp;
}

// ---------------------------------------------------------------------------
// Metrics

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
    const double iy = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    const double uni = static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double precision_metric(const std::vector<BoundingBox>& results,
                        const std::vector<BoundingBox>& gt, double tau_c) {
    if (results.size() != gt.size())
        throw EvalError("precision: result/groundtruth length mismatch: " +
                        std::to_string(results.size()) + " vs " + std::to_string(gt.size()));
    if (results.empty()) throw EvalError("precision on empty trajectory");
    int hits = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const double dx = results[i].cx - gt[i].cx;
        const double dy = results[i].cy - gt[i].cy;
        if (std::sqrt(dx * dx + dy * dy) < tau_c) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

SuccessResult success_metric(const std::vector<BoundingBox>& results,
                             const std::vector<BoundingBox>& gt, double tau_o) {
    if (results.size() != gt.size())
        throw EvalError("success: result/groundtruth length mismatch: " +
                        std::to_string(results.size()) + " vs " + std::to_string(gt.size()));
    if (results.empty()) throw EvalError("success on empty trajectory");

    std::vector<double> overlaps(results.size());
    for (std::size_t i = 0; i < results.size(); ++i) overlaps[i] = iou(results[i], gt[i]);

    SuccessResult out;
    int hits = 0;
    for (double o : overlaps)
        if (o > tau_o) ++hits;
    out.rate = static_cast<double>(hits) / static_cast<double>(overlaps.size());

    double auc = 0.0;
    for (int t = 0; t <= 20; ++t) {
        const double tau = 0.05 * t;
        int h = 0;
        for (double o : overlaps)
            if (o > tau) ++h;
        auc += static_cast<double>(h) / static_cast<double>(overlaps.size());
    }
    out.auc = auc / 21.0;
    return out;
}

VotResult vot_eval(SequenceTracker& tracker, const SequenceManifest& manifest, int skip,
                   int burn_in) {
    if (skip < 1) throw ParameterError("vot_eval skip must be >= 1");
    const int frames = manifest.frames;

    struct Segment {
        std::vector<double> overlaps;
        bool failed = false;
    };
    std::vector<Segment> segments;
    VotResult result;

    double acc_sum = 0.0;
    int acc_n = 0;

    int last_init = 0;
    tracker.init(load_frame(manifest, 0), manifest.entries[0].gt);
    Segment cur;

    int i = 1;
    while (i < frames) {
        const BoundingBox box = tracker.track(load_frame(manifest, i));
        const double o = iou(box, manifest.entries[static_cast<std::size_t>(i)].gt);
        if (o == 0.0) {
            result.failure_frames.push_back(i);
            cur.failed = true;
            segments.push_back(std::move(cur));
            cur = Segment{};
            const int j = i + skip;
            if (j >= frames) {
                i = frames;
                break;
            }
            tracker.init(load_frame(manifest, j), manifest.entries[static_cast<std::size_t>(j)].gt);
            result.reinit_frames.push_back(j);
            last_init = j;
            i = j + 1;
            continue;
        }
        cur.overlaps.push_back(o);
        if (i - last_init > burn_in) {
            acc_sum += o;
            ++acc_n;
        }
        ++i;
    }
    if (!cur.overlaps.empty() || !cur.failed) segments.push_back(std::move(cur));

    result.accuracy = acc_n > 0 ? acc_sum / acc_n : 0.0;
    result.robustness =
        100.0 * static_cast<double>(result.failure_frames.size()) / static_cast<double>(frames);

    const int l_min = static_cast<int>(std::ceil(0.5 * frames));
    const int l_max = static_cast<int>(std::floor(1.5 * frames));
    double eao_sum = 0.0;
    int eao_n = 0;
    for (int len = l_min; len <= l_max; ++len) {
        double seg_sum = 0.0;
        int seg_n = 0;
        for (const Segment& seg : segments) {
            const int take = static_cast<int>(std::min(
                seg.overlaps.size(), static_cast<std::size_t>(len)));
            if (seg.failed) {
                double s = 0.0;
                for (int k = 0; k < take; ++k) s += seg.overlaps[static_cast<std::size_t>(k)];
                seg_sum += s / len;  // zero-padded to len
                ++seg_n;
            } else if (!seg.overlaps.empty()) {
                double s = 0.0;
                for (int k = 0; k < take; ++k) s += seg.overlaps[static_cast<std::size_t>(k)];
                seg_sum += s / take;  // truncated by the sequence end
                ++seg_n;
            }
        }
        if (seg_n > 0) {
            eao_sum += seg_sum / seg_n;
            ++eao_n;
        }
    }
    result.eao = eao_n > 0 ? eao_sum / eao_n : 0.0;
    return result;
}

// ---------------------------------------------------------------------------
// Result and report files

void write_result_file(const std::string& path, const ResultFile& results) {
    if (results.boxes.size() != results.confidence.size())
        throw EvalError("result file: box/confidence length mismatch");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write result file: " + path);
    char line[160];
    for (std::size_t i = 0; i < results.boxes.size(); ++i) {
        const BoundingBox& b = results.boxes[i];
        std::snprintf(line, sizeof(line), "%.4f,%.4f,%.4f,%.4f,%.6f\n",
                      static_cast<double>(b.x0()), static_cast<double>(b.y0()),
                      static_cast<double>(b.w), static_cast<double>(b.h),
                      static_cast<double>(results.confidence[i]));
        f << line;
    }
}

ResultFile read_result_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open result file: " + path);
    ResultFile out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        float x, y, w, h, conf;
        if (std::sscanf(line.c_str(), "%f,%f,%f,%f,%f", &x, &y, &w, &h, &conf) != 5)
            throw FormatError("bad result line " + std::to_string(lineno) + ": " + line);
        out.boxes.push_back(BoundingBox::from_corner(x, y, w, h));
        out.confidence.push_back(conf);
    }
    return out;
}

double EvalReport::metric(const std::string& key) const {
    for (const auto& [k, v] : metrics)
        if (k == key) return v;
    throw EvalError("report has no metric " + key);
}

std::string report_str(const EvalReport& r) {
    std::string out = "taat-report v1\n";
    out += "protocol: " + r.protocol + "\n";
    out += "sequence: " + r.sequence + "\n";
    out += "frames: " + std::to_string(r.frames) + "\n";
    char line[128];
    for (const auto& [k, v] : r.metrics) {
        std::snprintf(line, sizeof(line), "%s: %.6f\n", k.c_str(), v);
        out += line;
    }
    return out;
}

void write_report(const EvalReport& r, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write report: " + path);
    f << report_str(r);
}

EvalReport parse_report_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "taat-report v1")
        throw FormatError("bad report header");
    EvalReport r;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto colon = line.find(": ");
        if (colon == std::string::npos) throw FormatError("bad report line: " + line);
        const std::string key = line.substr(0, colon);
        const std::string val = line.substr(colon + 2);
        if (key == "protocol")
            r.protocol = val;
        else if (key == "sequence")
            r.sequence = val;
        else if (key == "frames")
            r.frames = std::stoi(val);
        else
            r.metrics.emplace_back(key, std::stod(val));
    }
    return r;
}

EvalReport read_report(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open report: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_report_text(ss.str());
}

}  // namespace taat
