// mmwl: dataset generation, weather impairment, training, evaluation,
// ablation and robustness sweeps for mmWave beam prediction.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 verification
// failure. Logging level comes from MMW_LOG in {error, info, debug}.

#include <CLI11.hpp>
#include <filesystem>

#include "mmwl/dataset.hpp"
#include "mmwl/evalkit.hpp"
#include "mmwl/model.hpp"
#include "mmwl/weather.hpp"

namespace fs = std::filesystem;
using namespace mmwl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

model::ModelConfig bind_model_config(model::ModelConfig cfg, const dataset::Manifest& m) {
    cfg.q_count = m.cfg.q_tx;
    cfg.j_ratio = m.cfg.sensors.period_ticks;
    return cfg;
}

int cmd_gen(const std::string& config_path, const std::string& out_dir, std::uint64_t seed,
            int workers) {
    const json j = load_config(config_path, "mmw-gen/1");
    const auto cfg = dataset::gen_config_from_json(j);
    fs::create_directories(out_dir);
    auto manifest = dataset::gen_dataset(cfg, out_dir, seed, workers);
    int frames = 0;
    for (const auto& [split, list] : manifest.splits)
        for (const auto& t : list) frames += t.n_frames;
    std::printf("generated %d frames across %zu splits into %s\n", frames, manifest.splits.size(),
                out_dir.c_str());
    return kExitOk;
}

int cmd_impair(const std::string& in_dir, const std::string& weather, const std::string& out_dir) {
    const auto preset = weather::resolve_preset(weather);
    const auto manifest = dataset::load_manifest(in_dir);
    fs::create_directories(out_dir);

    for (const auto& [split, list] : manifest.splits) {
        for (std::size_t ti = 0; ti < list.size(); ++ti) {
            const auto traj = dataset::load_trajectory(in_dir, list[ti]);
            std::string body;
            for (const auto& frame : traj.frames) {
                dataset::FrameRecord f = frame;
                if (f.lidar && !preset.identity()) {
                    weather::FogParams fog = preset.fog;
                    fog.seed = derive_seed(preset.fog.seed, fnv1a(traj.meta.id),
                                           static_cast<std::uint64_t>(f.t_index));
                    weather::RainParams rain = preset.rain;
                    rain.seed = derive_seed(preset.rain.seed, fnv1a(traj.meta.id),
                                            static_cast<std::uint64_t>(f.t_index));
                    auto impaired = weather::apply_fog(*f.lidar, fog);
                    impaired = weather::apply_rain(impaired.cloud, rain);
                    f.lidar = std::move(impaired.cloud);
                }
                if (f.image && preset.camera_fog_visibility_m > 0.0) {
                    // camera proxy under fog: class channel zeroed beyond the
                    // visibility range (depth recovered from inverse depth)
                    auto& img = *f.image;
                    const double ref = manifest.cfg.sensors.cam_depth_ref_m;
                    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
                    for (std::size_t px = 0; px < plane; ++px) {
                        const double inv = img.chw[px];
                        if (inv <= 0.0) continue;
                        if (ref / inv > preset.camera_fog_visibility_m) img.chw[plane + px] = 0.0;
                    }
                }
                body += dataset::frame_to_json(f).dump();
                body += '\n';
            }
            const fs::path p = fs::path(out_dir) / list[ti].rel_path;
            fs::create_directories(p.parent_path());
            write_text_file(p.string(), body);
        }
    }
    fs::copy_file(fs::path(in_dir) / "manifest.json", fs::path(out_dir) / "manifest.json",
                  fs::copy_options::overwrite_existing);
    write_text_file((fs::path(out_dir) / "weather.json").string(),
                    weather::preset_to_json(preset).dump(2) + "\n");
    std::printf("impaired dataset written to %s (preset %s)\n", out_dir.c_str(), preset.name.c_str());
    return kExitOk;
}

int cmd_train(const std::string& data_dir, const std::string& model_config_path,
              const std::string& out_ckpt, int workers) {
    model::ModelConfig cfg;
    if (!model_config_path.empty())
        cfg = model::model_config_from_json(load_config(model_config_path, "mmw-model/1"));
    const auto manifest = dataset::load_manifest(data_dir);
    cfg = bind_model_config(cfg, manifest);
    cfg.workers = workers;
    cfg.validate();

    auto train_trajs = dataset::load_split(data_dir, manifest, "train");
    auto val_trajs = dataset::load_split(data_dir, manifest, "val");
    nn::ParamStore ps;
    model::register_params(ps, cfg);
    auto tb = model::bind_data(train_trajs, cfg);
    auto vb = model::bind_data(val_trajs, cfg);
    auto res = model::train(ps, cfg, tb, vb);
    if (!out_ckpt.empty() && fs::path(out_ckpt).has_parent_path())
        fs::create_directories(fs::path(out_ckpt).parent_path());
    model::save_model(out_ckpt, ps, cfg);
    write_text_file(out_ckpt + ".log.csv", model::training_log_csv(res));
    std::printf("trained %zu epochs, best val %.6f at epoch %d; checkpoint %s\n", res.log.size(),
                res.best_val, res.best_epoch, out_ckpt.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& report_dir,
             const std::string& split, const std::string& predictor, int workers,
             int dump_attention_anchor) {
    nn::ParamStore ps;
    model::ModelConfig cfg = model::load_model(ckpt, ps);
    const auto manifest = dataset::load_manifest(data_dir);
    if (manifest.cfg.q_tx != cfg.q_count)
        throw std::runtime_error("eval: dataset codebook size differs from the checkpoint");
    auto trajs = dataset::load_split(data_dir, manifest, split);
    auto bound = model::bind_data(trajs, cfg);

    evalkit::EvalOptions opts;
    opts.predictor = evalkit::predictor_from_string(predictor);
    opts.workers = workers;
    auto rep = evalkit::evaluate(ps, cfg, bound, opts);

    fs::create_directories(report_dir);
    write_text_file(report_dir + "/report.csv", evalkit::report_csv(rep));
    write_text_file(report_dir + "/summary.json", evalkit::report_json(rep).dump(2) + "\n");
    if (dump_attention_anchor >= 0) {
        evalkit::dump_attention(ps, cfg, bound, 0, dump_attention_anchor,
                                report_dir + "/frame" + std::to_string(dump_attention_anchor));
    }
    std::printf("evaluated %d windows: avg gain %.4f, avg acc@1 %.4f, avg acc@3 %.4f\n",
                rep.n_samples, rep.avg_gain, rep.avg_acc1, rep.avg_acc3);
    return kExitOk;
}

int cmd_ablate(const std::string& data_dir, const std::string& axes,
               const std::string& model_config_path, const std::string& out_dir, int workers) {
    model::ModelConfig base;
    if (!model_config_path.empty())
        base = model::model_config_from_json(load_config(model_config_path, "mmw-model/1"));
    const auto manifest = dataset::load_manifest(data_dir);
    base = bind_model_config(base, manifest);

    bool ax_modalities = false, ax_bgam = false;
    std::stringstream ss(axes);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "modalities") ax_modalities = true;
        else if (tok == "bgam") ax_bgam = true;
        else if (!tok.empty()) throw std::runtime_error("ablate: unknown axis " + tok);
    }
    std::vector<std::string> modality_sets;
    if (ax_modalities) {
        modality_sets = {"index", "index+lidar", "index+camera", "index+lidar+camera"};
        const bool have_camera = manifest.cfg.sensors.record_camera;
        if (!have_camera)
            modality_sets = {"index", "index+lidar"};
    } else {
        std::string cur = "index";
        if (base.use_lidar) cur += "+lidar";
        if (base.use_camera) cur += "+camera";
        modality_sets = {cur};
    }
    const std::vector<bool> bgam_options = ax_bgam ? std::vector<bool>{true, false}
                                                   : std::vector<bool>{base.bgam};

    auto train_trajs = dataset::load_split(data_dir, manifest, "train");
    auto val_trajs = dataset::load_split(data_dir, manifest, "val");
    auto test_trajs = dataset::load_split(data_dir, manifest, "test");
    auto cells = evalkit::ablate(base, train_trajs, val_trajs, test_trajs, modality_sets,
                                 bgam_options, workers);
    fs::create_directories(out_dir);
    write_text_file(out_dir + "/ablation.csv", evalkit::ablation_csv(cells));
    std::printf("ablation table (%zu cells) written to %s/ablation.csv\n", cells.size(),
                out_dir.c_str());
    return kExitOk;
}

int cmd_sweep_nt(const std::string& ckpt, const std::string& nt_list, const std::string& gen_config,
                 std::uint64_t seed, const std::string& out_dir, int workers) {
    nn::ParamStore ps;
    model::ModelConfig cfg = model::load_model(ckpt, ps);
    const auto gen = dataset::gen_config_from_json(load_config(gen_config, "mmw-gen/1"));
    std::vector<int> nts;
    std::stringstream ss(nt_list);
    std::string tok;
    while (std::getline(ss, tok, ',')) nts.push_back(std::stoi(tok));
    if (nts.empty()) throw std::runtime_error("sweep-nt: empty antenna list");
    fs::create_directories(out_dir);
    auto rows = evalkit::robustness_sweep(ps, cfg, gen, seed, nts, out_dir + "/datasets", workers);
    write_text_file(out_dir + "/sweep.csv", evalkit::sweep_csv(rows));
    for (const auto& r : rows)
        std::printf("n_tx %d: avg gain %.4f, avg acc@1 %.4f\n", r.n_tx, r.report.avg_gain,
                    r.report.avg_acc1);
    return kExitOk;
}

int cmd_oracle(const std::string& data_dir) {
    const auto manifest = dataset::load_manifest(data_dir);
    const auto tx = phy::dft_codebook(manifest.cfg.q_tx, manifest.cfg.array.n_tx);
    const auto rx = phy::dft_codebook(manifest.cfg.q_rx, manifest.cfg.array.n_rx);
    long checked = 0, mismatched = 0;
    for (const auto& [split, list] : manifest.splits) {
        for (const auto& meta : list) {
            const auto traj = dataset::load_trajectory(data_dir, meta);
            for (const auto& f : traj.frames) {
                const auto h =
                    phy::avg_channel(phy::synth_channel(f.paths, manifest.cfg.grid, manifest.cfg.array));
                const auto res = phy::optimal_beam_pair(h, tx, rx);
                ++checked;
                if (res.p_star != f.p_star || res.q_star != f.q_star) {
                    ++mismatched;
                    if (mismatched <= 5)
                        std::fprintf(stderr, "label mismatch at %s frame %d: stored (%d,%d) vs (%d,%d)\n",
                                     meta.id.c_str(), f.t_index, f.p_star, f.q_star, res.p_star,
                                     res.q_star);
                }
            }
        }
    }
    std::printf("oracle replay: %ld frames checked, %ld mismatches\n", checked, mismatched);
    return mismatched == 0 ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmWave multimodal beam prediction workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir, in_dir, weather, data_dir, model_config_path, ckpt, report_dir;
    std::string split = "test", predictor = "model", axes = "modalities,bgam", nt_list;
    std::uint64_t seed = 1;
    int workers = 1;
    int dump_anchor = -1;

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    gen->add_option("--config", config_path, "gen config JSON (format mmw-gen/1)")->required();
    gen->add_option("--out", out_dir, "output dataset directory")->required();
    gen->add_option("--seed", seed, "master seed");
    gen->add_option("--workers", workers, "worker threads (output is identical for any count)");

    auto* impair = app.add_subcommand("impair", "apply weather impairment to a dataset");
    impair->add_option("--in", in_dir, "input dataset directory")->required();
    impair->add_option("--weather", weather,
                       "preset name (sunny|fog_heavy|rain_heavy) or preset JSON path")
        ->required();
    impair->add_option("--out", out_dir, "output dataset directory")->required();

    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--model-config", model_config_path, "model config JSON (format mmw-model/1)");
    train->add_option("--out", ckpt, "output checkpoint path")->required();
    train->add_option("--workers", workers, "worker threads (result is identical for any count)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--report", report_dir, "report output directory")->required();
    eval->add_option("--split", split, "dataset split (default test)");
    eval->add_option("--predictor", predictor, "model|oracle|random|persistence");
    eval->add_option("--workers", workers, "worker threads");
    eval->add_option("--dump-attention", dump_anchor, "window anchor for an attention dump");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate an ablation grid");
    ablate->add_option("--data", data_dir, "dataset directory")->required();
    ablate->add_option("--axes", axes, "comma list from {modalities,bgam}");
    ablate->add_option("--model-config", model_config_path, "base model config JSON");
    ablate->add_option("--out", out_dir, "output directory")->required();
    ablate->add_option("--workers", workers, "worker threads");

    auto* sweep = app.add_subcommand("sweep-nt", "robustness sweep over transmit antenna counts");
    sweep->add_option("--ckpt", ckpt, "checkpoint path")->required();
    sweep->add_option("--nt", nt_list, "comma list of N_t values, e.g. 8,16,32")->required();
    sweep->add_option("--config", config_path, "gen config JSON used to regenerate test sets")
        ->required();
    sweep->add_option("--seed", seed, "gen seed for the regenerated datasets");
    sweep->add_option("--out", out_dir, "output directory")->required();
    sweep->add_option("--workers", workers, "worker threads");

    auto* oracle = app.add_subcommand("oracle", "replay labels from stored paths and verify");
    oracle->add_option("--data", data_dir, "dataset directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen(config_path, out_dir, seed, workers);
        if (impair->parsed()) return cmd_impair(in_dir, weather, out_dir);
        if (train->parsed()) return cmd_train(data_dir, model_config_path, ckpt, workers);
        if (eval->parsed())
            return cmd_eval(ckpt, data_dir, report_dir, split, predictor, workers, dump_anchor);
        if (ablate->parsed()) return cmd_ablate(data_dir, axes, model_config_path, out_dir, workers);
        if (sweep->parsed()) return cmd_sweep_nt(ckpt, nt_list, config_path, seed, out_dir, workers);
        if (oracle->parsed()) return cmd_oracle(data_dir);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    }
    return kExitUsage;
}
