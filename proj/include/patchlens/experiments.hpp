#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchlens/attribution.hpp"
#include "patchlens/bundle.hpp"

namespace patchlens {

// One annotated color-answering case.
//
// Annotation files hold one record per line: tab-separated key=value fields
// (spaces also separate fields when a line has no tab). Keys: animal, color,
// distractor (required); image, mask, split (optional). Blank lines and lines
// starting with '#' are ignored. Relative paths resolve against the file's
// directory. A mask is an image of the same framing whose nonzero pixels mark
// the animal.
struct CaseAnnotation {
    std::string image;  // empty for text-only cases
    std::string animal;
    std::string color;
    std::string distractor;
    std::string split = "default";
    std::string mask;
    int line = 0;
};

struct IngestIssue {
    int line = 0;
    std::string reason;
};

struct IngestResult {
    std::vector<CaseAnnotation> cases;
    std::vector<IngestIssue> errors;      // rejected lines, valid lines are kept
    std::vector<std::string> warnings;
    std::size_t duplicates = 0;           // dropped repeats of (image, animal)
};

IngestResult ingest_annotations(std::istream& in, const std::filesystem::path& base_dir = {});
// Throws InputError when the file cannot be opened.
IngestResult ingest_annotations(const std::filesystem::path& path);

enum class StatKind { proportion, mrr, logit, attention, count };
std::string to_string(StatKind kind);

struct Statistic {
    std::string name;
    StatKind kind = StatKind::count;
    double value = 0.0;
    std::size_t count = 0;
    std::vector<double> samples;  // per-case values behind the mean
};

// Named evidence statistics plus case accounting. Append-only after finalize().
class EvidenceReport {
public:
    EvidenceReport() = default;
    EvidenceReport(std::string pipeline, std::string model_id);

    // Adds the mean of `samples`. An empty sample list is recorded as
    // unavailable instead. Throws std::logic_error once finalized, InputError
    // for a value outside its kind's range.
    void add_mean(const std::string& name, StatKind kind, const std::vector<double>& samples);
    void add(Statistic stat);
    void note_unavailable(const std::string& name, const std::string& reason);

    void set_ingested(std::size_t n) { mutate().ingested_ = n; }
    void include_case() { ++mutate().included_; }
    void exclude_case(const std::string& reason);
    void set_profile(const HeadGrid& scores, const HeadGrid& profile);
    void set_config(nlohmann::json config, std::string fingerprint);

    void finalize();
    bool finalized() const { return finalized_; }

    const std::string& pipeline() const { return pipeline_; }
    const std::string& model_id() const { return model_id_; }
    const std::vector<Statistic>& statistics() const { return stats_; }
    const Statistic& get(const std::string& name) const;
    bool has(const std::string& name) const;
    std::size_t ingested() const { return ingested_; }
    std::size_t included() const { return included_; }
    std::size_t excluded() const { return excluded_; }
    const std::map<std::string, std::size_t>& exclusions() const { return exclusions_; }
    const std::string& fingerprint() const { return fingerprint_; }
    const std::optional<HeadGrid>& profile_scores() const { return profile_scores_; }
    const std::optional<HeadGrid>& profile() const { return profile_; }

    // Schema "evidence-report-v1".
    nlohmann::json to_json() const;
    static EvidenceReport from_json(const nlohmann::json& j);
    // name,kind,value,count
    std::string to_csv() const;

private:
    EvidenceReport& mutate();

    std::string pipeline_;
    std::string model_id_;
    std::vector<Statistic> stats_;
    std::map<std::string, std::string> unavailable_;
    std::size_t ingested_ = 0;
    std::size_t included_ = 0;
    std::size_t excluded_ = 0;
    std::map<std::string, std::size_t> exclusions_;
    std::optional<HeadGrid> profile_scores_;
    std::optional<HeadGrid> profile_;
    nlohmann::json config_ = nlohmann::json::object();
    std::string fingerprint_;
    bool finalized_ = false;
};

struct ExperimentConfig {
    int top_heads = 10;        // heads behind every mechanism statistic
    int top_positions = 20;    // VQA positions per case
    bool correctness_gate = true;
    std::uint64_t seed = 0;
    CapturePrecision precision = CapturePrecision::f32;
    // Pools for random baselines; empty means the toy color and animal lists.
    std::vector<std::string> color_pool;
    std::vector<std::string> animal_pool;
    std::filesystem::path heatmap_dir;  // when set, VQA heatmaps are written here

    nlohmann::json to_json() const;
};

// Fingerprint of (config, templates, model id, cases) used to tie a report to
// its inputs.
std::string config_fingerprint(const ExperimentConfig& config, const ModelBundle& model,
                               const std::vector<CaseAnnotation>& cases);

// Text pipeline over the S0/S1/S2 prompts. Statistics:
//   a.color_position_share                 (proportion, %)
//   b.mrr_correct_color, b.mrr_random_color, b.logit_minus_correct_vs_random
//   c.s0_mrr_animal, c.s0_mrr_distractor, c.s0_logit_minus
//   c.s1_mrr_animal, c.s1_mrr_distractor, c.s1_logit_minus
//   d.attention_s0, d.attention_s1, d.attention_s2
EvidenceReport run_tqa_evidence(const std::vector<CaseAnnotation>& cases, const ModelBundle& model,
                                const ExperimentConfig& config);

// Visual pipeline. Statistics:
//   a.mask_share, a.argmax_in_mask        (only for cases with masks)
//   b.mrr_correct_color, b.mrr_random_color, b.logit_minus_correct_vs_random
//   c.mrr_animal, c.mrr_other_animal, c.logit_minus
//   d.attention_same_animal, d.attention_other_animal
//   e.mrr_color, e.mrr_random_color, e.mrr_animal, e.mrr_random_animal,
//   e.control_mrr_color, e.control_mrr_animal
EvidenceReport run_vqa_evidence(const std::vector<CaseAnnotation>& cases, const ModelBundle& model,
                                const ExperimentConfig& config);

// Same visual pipeline with an alternate question; reports
//   animal_patch_attention   attention mass of the top heads on masked cells
// The template may use {animal} or not.
EvidenceReport run_alt_question_probe(const std::vector<CaseAnnotation>& cases, const ModelBundle& model,
                                      const ExperimentConfig& config, const std::string& question_template);

struct ModelComparison {
    struct Pair {
        std::string a, b;
        int overlap = 0;
        HeadGrid delta;  // profile(b) - profile(a), in share points
    };
    int k = 10;
    std::map<std::string, std::vector<HeadId>> top;
    std::vector<Pair> pairs;

    nlohmann::json to_json() const;
};

// Pairwise top-k overlaps and share deltas. Throws InputError for fewer than
// two profiles or mismatched dimensions.
ModelComparison compare_models(const std::map<std::string, HeadGrid>& profiles, int k);

// Head profile grid image: one cell per head, brighter is more important.
void write_head_grid_png(const HeadGrid& profile, const std::filesystem::path& path, int cell_px = 16);
std::string head_grid_csv(const HeadGrid& grid);

// Writes <prefix>.json and <prefix>.csv.
void write_report(const EvidenceReport& report, const std::filesystem::path& prefix);

// Makes `n` desk-scale cases with synthetic images and masks under `dir`
// (one colored animal block on background per image) plus the annotation
// file; returns the annotation file path.
std::filesystem::path make_stub_cases(const std::filesystem::path& dir, int n, std::uint64_t seed,
                                      int image_size = 96);

}  // namespace patchlens
