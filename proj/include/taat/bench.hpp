#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "taat/siamese.hpp"
#include "taat/tensor.hpp"

namespace taat {

// One aligned RGB/TIR frame pair as float tensors in [0,1].
struct FramePair {
    Tensor rgb;  // [1,3,H,W]
    Tensor tir;  // [1,1,H,W]
};

struct FrameEntry {
    std::string rgb_path, tir_path;  // relative to the manifest directory
    BoundingBox gt;
};

struct SequenceManifest {
    std::string name;
    int frames = 0;
    int width = 0, height = 0;
    std::string scheme;
    std::vector<FrameEntry> entries;
    std::string dir;  // resolved on load/generate
};

// Degradation schemes: "clean", "rgb_blackout(a,b)", "tir_crossover(a,b)",
// or several joined with '+'. Ranges are inclusive frame indices.
struct GenSpec {
    std::uint64_t seed = 0;
    int frames = 60;
    int width = 256;
    int height = 192;
    std::string scheme = "clean";
    std::string name = "seq";
    float speed = 2.5f;  // target pixels per frame
};

SequenceManifest generate_sequence(const GenSpec& spec, const std::string& out_dir);
SequenceManifest load_manifest(const std::string& path);
void save_manifest(const SequenceManifest& m, const std::string& path);
FramePair load_frame(const SequenceManifest& m, int idx);

// ---------------------------------------------------------------------------
// Metrics

double iou(const BoundingBox& a, const BoundingBox& b);

double precision_metric(const std::vector<BoundingBox>& results,
                        const std::vector<BoundingBox>& gt, double tau_c = 5.0);

struct SuccessResult {
    double rate = 0.0;  // fraction with IoU > tau_o
    double auc = 0.0;   // mean success over thresholds 0.00, 0.05, ..., 1.00
};
SuccessResult success_metric(const std::vector<BoundingBox>& results,
                             const std::vector<BoundingBox>& gt, double tau_o = 0.6);

// Tracker abstraction for the reset-based protocol.
class SequenceTracker {
public:
    virtual ~SequenceTracker() = default;
    virtual void init(const FramePair& frame, const BoundingBox& gt) = 0;
    virtual BoundingBox track(const FramePair& frame) = 0;
};

struct VotResult {
    double accuracy = 0.0;
    double robustness = 0.0;  // failures per 100 frames
    double eao = 0.0;
    std::vector<int> failure_frames;  // 0-based frame indices
    std::vector<int> reinit_frames;
};

// Reset protocol: a frame with IoU exactly 0 counts as a failure and the
// tracker restarts `skip` frames later. Accuracy averages overlaps of
// successfully tracked frames more than `burn_in` frames past the latest
// (re)initialization. EAO averages zero-padded per-segment overlap curves
// over segment lengths in [0.5, 1.5] x sequence length; curves cut short by
// the sequence end (not by failure) are truncated, not padded.
VotResult vot_eval(SequenceTracker& tracker, const SequenceManifest& manifest, int skip = 5,
                   int burn_in = 10);

// ---------------------------------------------------------------------------
// Result and report files

struct ResultFile {
    std::vector<BoundingBox> boxes;
    std::vector<float> confidence;
};

// One "x,y,w,h,confidence" line per frame, top-left convention, LF endings.
void write_result_file(const std::string& path, const ResultFile& results);
ResultFile read_result_file(const std::string& path);

struct EvalReport {
    std::string protocol;
    std::string sequence;
    int frames = 0;
    // insertion-ordered metric values
    std::vector<std::pair<std::string, double>> metrics;

    double metric(const std::string& key) const;
};

std::string report_str(const EvalReport& r);
void write_report(const EvalReport& r, const std::string& path);
EvalReport parse_report_text(const std::string& text);
EvalReport read_report(const std::string& path);

}  // namespace taat
