#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dawn/common.hpp"
#include "dawn/fdm.hpp"
#include "dawn/lfg.hpp"
#include "dawn/metrics.hpp"
#include "dawn/pbnet.hpp"
#include "dawn/pipeline.hpp"
#include "dawn/synth.hpp"

namespace {

using namespace dawn;

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out << text;
}

pipeline::SourceInput resolve_source(const std::string& spec,
                                     const synth::CorpusManifest* manifest) {
    pipeline::SourceInput src;
    if (spec.rfind("clip:", 0) == 0) {
        require(manifest != nullptr, "clip: source requires --corpus");
        auto rec = synth::load_clip(*manifest, spec.substr(5));
        src.frame = rec.frames.front();
        src.pose = rec.poses.row(0).transpose();
        src.face_mask = rec.face_masks.front().cast<double>();
    } else {
        src.frame = read_pgm(spec);  // pose unknown -> zero pose, flagged
    }
    return src;
}

Eigen::MatrixXd resolve_audio(const std::string& spec,
                              const synth::CorpusManifest* manifest) {
    if (spec.rfind("clip:", 0) == 0) {
        require(manifest != nullptr, "clip: audio requires --corpus");
        return synth::load_clip(*manifest, spec.substr(5)).audio.features;
    }
    return matrix_from_tensor(load_dten(spec));
}

int run(int argc, char** argv) {
    CLI::App app{"DAWN-style audio-driven avatar pipeline"};
    app.require_subcommand(1);

    // synth
    auto* c_synth = app.add_subcommand("synth", "generate a procedural corpus");
    std::string synth_out;
    int synth_clips = 200, synth_frames = 200;
    std::uint64_t synth_seed = 1;
    c_synth->add_option("--out", synth_out)->required();
    c_synth->add_option("--clips", synth_clips);
    c_synth->add_option("--frames", synth_frames);
    c_synth->add_option("--seed", synth_seed);

    // train-lfg
    auto* c_tlfg = app.add_subcommand("train-lfg", "train the latent flow generator");
    std::string tlfg_corpus, tlfg_out;
    int tlfg_steps = 3000, tlfg_batch = 16;
    std::uint64_t tlfg_seed = 1;
    double tlfg_lr = 2e-4;
    c_tlfg->add_option("--corpus", tlfg_corpus)->required();
    c_tlfg->add_option("--out", tlfg_out)->required();
    c_tlfg->add_option("--steps", tlfg_steps);
    c_tlfg->add_option("--batch", tlfg_batch);
    c_tlfg->add_option("--lr", tlfg_lr);
    c_tlfg->add_option("--seed", tlfg_seed);

    // train-pbnet
    auto* c_tpb = app.add_subcommand("train-pbnet", "train the pose/blink network");
    std::string tpb_corpus, tpb_out;
    int tpb_steps = 3000, tpb_batch = 8;
    std::uint64_t tpb_seed = 1;
    double tpb_lr = 2e-4;
    c_tpb->add_option("--corpus", tpb_corpus)->required();
    c_tpb->add_option("--out", tpb_out)->required();
    c_tpb->add_option("--steps", tpb_steps);
    c_tpb->add_option("--batch", tpb_batch);
    c_tpb->add_option("--lr", tpb_lr);
    c_tpb->add_option("--seed", tpb_seed);

    // train-fdm
    auto* c_tfdm = app.add_subcommand("train-fdm", "train the motion diffusion model");
    std::string tfdm_corpus, tfdm_lfg, tfdm_init, tfdm_out;
    int tfdm_stage = 1, tfdm_steps = 1200, tfdm_batch = 8;
    std::uint64_t tfdm_seed = 1;
    double tfdm_lr = 2e-4;
    c_tfdm->add_option("--stage", tfdm_stage)->required();
    c_tfdm->add_option("--corpus", tfdm_corpus)->required();
    c_tfdm->add_option("--lfg", tfdm_lfg)->required();
    c_tfdm->add_option("--init", tfdm_init);
    c_tfdm->add_option("--out", tfdm_out)->required();
    c_tfdm->add_option("--steps", tfdm_steps);
    c_tfdm->add_option("--batch", tfdm_batch);
    c_tfdm->add_option("--lr", tfdm_lr);
    c_tfdm->add_option("--seed", tfdm_seed);

    // shared inference options
    std::string inf_src, inf_audio, inf_cfg, inf_out, inf_drive, inf_corpus;

    auto* c_infer = app.add_subcommand("infer", "four-step NAR inference");
    c_infer->add_option("--src", inf_src)->required();
    c_infer->add_option("--audio", inf_audio)->required();
    c_infer->add_option("--cfg", inf_cfg)->required();
    c_infer->add_option("--out", inf_out)->required();
    bool inf_sar = false;
    int inf_chunk = 40;
    c_infer->add_flag("--sar", inf_sar, "use the semi-autoregressive strategy");
    c_infer->add_option("--chunk", inf_chunk);

    auto* c_reenact = app.add_subcommand("reenact", "cross-identity reenactment");
    c_reenact->add_option("--src", inf_src)->required();
    c_reenact->add_option("--drive", inf_drive)->required();
    c_reenact->add_option("--cfg", inf_cfg)->required();
    c_reenact->add_option("--out", inf_out)->required();

    // eval
    auto* c_eval = app.add_subcommand("eval", "compute metrics for generated output");
    std::string ev_gen, ev_ref, ev_metrics = "frechet,dr,blink,bas,lipcorr", ev_lfg, ev_out;
    c_eval->add_option("--gen", ev_gen)->required();
    c_eval->add_option("--ref", ev_ref)->required();
    c_eval->add_option("--metrics", ev_metrics);
    c_eval->add_option("--lfg", ev_lfg, "lfg checkpoint for encoder embeddings");
    c_eval->add_option("--corpus", inf_corpus, "corpus when --ref is clip:ID");
    c_eval->add_option("--out", ev_out, "also write report text here");

    // bench
    auto* c_bench = app.add_subcommand("bench", "NAR vs SAR strategy comparison");
    int bench_length = 200, bench_clips = 5;
    c_bench->add_option("--length", bench_length);
    c_bench->add_option("--clips", bench_clips);
    c_bench->add_option("--cfg", inf_cfg)->required();
    c_bench->add_option("--out", inf_out);

    // sweep
    auto* c_sweep = app.add_subcommand("sweep", "extrapolation length sweep");
    std::string sweep_lengths = "40,100,200,400,600";
    int sweep_clips = 6;
    c_sweep->add_option("--lengths", sweep_lengths);
    c_sweep->add_option("--clips", sweep_clips);
    c_sweep->add_option("--cfg", inf_cfg)->required();
    c_sweep->add_option("--out", inf_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (c_synth->parsed()) {
        synth::generate_corpus(synth_clips, synth_frames, synth_seed, synth_out);
        std::cout << "corpus written to " << synth_out << "\n";
        return 0;
    }
    if (c_tlfg->parsed()) {
        auto manifest = synth::load_manifest(tlfg_corpus);
        lfg::TrainConfig tc{tlfg_steps, tlfg_batch, tlfg_lr};
        lfg::LfgModel model = lfg::train_lfg(manifest, tc, tlfg_seed, &std::cout);
        lfg::save_checkpoint(model, tlfg_out);
        std::cout << "lfg checkpoint written to " << tlfg_out << "\n";
        return 0;
    }
    if (c_tpb->parsed()) {
        auto manifest = synth::load_manifest(tpb_corpus);
        pbnet::TrainConfig tc{tpb_steps, tpb_batch, tpb_lr};
        pbnet::PbModel model = pbnet::train_pbnet(manifest, tc, tpb_seed, &std::cout);
        pbnet::save_checkpoint(model, tpb_out);
        std::cout << "pbnet checkpoint written to " << tpb_out << "\n";
        return 0;
    }
    if (c_tfdm->parsed()) {
        auto manifest = synth::load_manifest(tfdm_corpus);
        lfg::LfgModel lfg_model = lfg::load_checkpoint(tfdm_lfg);
        fdm::TrainConfig tc{tfdm_steps, tfdm_batch, tfdm_lr};
        std::optional<fdm::FdmModel> init;
        if (!tfdm_init.empty()) init = fdm::load_checkpoint(tfdm_init);
        fdm::FdmModel model = fdm::train_fdm(manifest, lfg_model, tfdm_stage, tc, tfdm_seed,
                                             init ? &*init : nullptr, &std::cout);
        fdm::save_checkpoint(model, tfdm_out);
        std::cout << "fdm checkpoint written to " << tfdm_out << "\n";
        return 0;
    }

    if (c_infer->parsed() || c_reenact->parsed()) {
        pipeline::PipelineConfig cfg = pipeline::load_pipeline_config(inf_cfg);
        std::optional<synth::CorpusManifest> manifest;
        if (!cfg.corpus.empty()) manifest = synth::load_manifest(cfg.corpus);
        const auto* mp = manifest ? &*manifest : nullptr;
        pipeline::SourceInput src = resolve_source(inf_src, mp);
        pipeline::InferResult res;
        if (c_reenact->parsed()) {
            require(mp != nullptr, "reenact requires corpus in the config");
            auto drive = synth::load_clip(*mp, inf_drive.rfind("clip:", 0) == 0
                                                   ? inf_drive.substr(5)
                                                   : inf_drive);
            pipeline::Pipeline p = pipeline::load_pipeline(cfg, false);
            res = pipeline::reenact(src, drive.audio.features, drive.poses, p, cfg);
        } else {
            Eigen::MatrixXd audio = resolve_audio(inf_audio, mp);
            pipeline::Pipeline p = pipeline::load_pipeline(cfg, true);
            res = inf_sar ? pipeline::infer_sar(src, audio, p, cfg, inf_chunk)
                          : pipeline::infer(src, audio, p, cfg);
        }
        pipeline::write_infer_outputs(inf_out, res);
        std::cout << "wrote " << res.report.frames << " frames to " << inf_out << "\n";
        return 0;
    }

    if (c_eval->parsed()) {
        std::vector<synth::Image> gen = pipeline::read_frames_dten(
            std::filesystem::path(ev_gen) / "frames.dten");
        Eigen::MatrixXd gen_poses = matrix_from_tensor(
            load_dten(std::filesystem::path(ev_gen) / "poses.dten"));

        std::vector<synth::Image> ref;
        Eigen::MatrixXd ref_audio;
        if (ev_ref.rfind("clip:", 0) == 0) {
            require(!inf_corpus.empty(), "--ref clip:ID requires --corpus");
            auto manifest = synth::load_manifest(inf_corpus);
            auto rec = synth::load_clip(manifest, ev_ref.substr(5));
            ref = rec.frames;
            ref_audio = rec.audio.features;
        } else {
            ref = pipeline::read_frames_dten(std::filesystem::path(ev_ref) / "frames.dten");
            auto apath = std::filesystem::path(ev_ref) / "audio.dten";
            if (std::filesystem::exists(apath)) ref_audio = matrix_from_tensor(load_dten(apath));
        }
        const int n = static_cast<int>(std::min(gen.size(), ref.size()));
        gen.resize(static_cast<std::size_t>(n));
        ref.resize(static_cast<std::size_t>(n));

        std::optional<lfg::LfgModel> lfg_model;
        if (!ev_lfg.empty()) lfg_model = lfg::load_checkpoint(ev_lfg);
        auto embedder = lfg_model ? metrics::Embedder::LfgEncoderPooled
                                  : metrics::Embedder::RandomProjection;
        const lfg::LfgModel* lp = lfg_model ? &*lfg_model : nullptr;

        metrics::MetricsReport rep;
        rep.clip_id = ev_gen;
        for (const auto& m : std::vector<std::string>{"frechet", "dr", "blink", "bas",
                                                      "lipcorr"}) {
            if (ev_metrics.find(m) == std::string::npos) continue;
            if (m == "frechet")
                rep.frechet = metrics::frechet_distance(
                    metrics::embed_frames(gen, embedder, lp),
                    metrics::embed_frames(ref, embedder, lp));
            else if (m == "dr") {
                if (n >= 50)
                    rep.dr_25 = metrics::degradation_rate(gen, ref, 25, embedder, lp).dr;
                if (n >= 100)
                    rep.dr_50 = metrics::degradation_rate(gen, ref, 50, embedder, lp).dr;
            } else if (m == "blink")
                rep.blink = metrics::blink_rate(gen_poses.topRows(n).rightCols(2), 25.0);
            else if (m == "bas") {
                require(ref_audio.rows() >= n, "bas requires reference audio");
                rep.bas = metrics::beat_align(ref_audio.col(0).head(n), gen_poses.topRows(n));
            } else if (m == "lipcorr") {
                require(ref_audio.rows() >= n, "lipcorr requires reference audio");
                rep.lip_corr =
                    metrics::lip_sync_corr(gen, gen_poses.topRows(n), ref_audio.col(0).head(n));
            }
        }
        std::string text = metrics::report_text(rep);
        std::cout << text;
        if (!ev_out.empty()) {
            write_text(ev_out, text);
            write_text(ev_out + ".csv", metrics::report_csv({rep}));
        }
        return 0;
    }

    if (c_bench->parsed() || c_sweep->parsed()) {
        pipeline::PipelineConfig cfg = pipeline::load_pipeline_config(inf_cfg);
        require(!cfg.corpus.empty(), "config must name the corpus");
        auto manifest = synth::load_manifest(cfg.corpus);
        pipeline::Pipeline p = pipeline::load_pipeline(cfg, true);
        if (c_bench->parsed()) {
            auto rows = pipeline::bench_strategies(p, cfg, manifest, bench_length, bench_clips);
            std::string text = pipeline::bench_text(rows);
            std::cout << text;
            if (!inf_out.empty()) {
                write_text(inf_out, text);
                write_text(inf_out + ".csv", pipeline::bench_csv(rows));
            }
        } else {
            std::vector<int> lengths;
            std::stringstream ss(sweep_lengths);
            for (std::string item; std::getline(ss, item, ',');)
                lengths.push_back(std::stoi(item));
            auto rows = pipeline::extrapolation_sweep(p, cfg, manifest, lengths, sweep_clips);
            std::string text = pipeline::sweep_text(rows);
            std::cout << text;
            if (!inf_out.empty()) {
                write_text(inf_out, text);
                write_text(inf_out + ".csv", pipeline::sweep_csv(rows));
            }
        }
        return 0;
    }
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const dawn::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return 2;
    } catch (const dawn::io_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const dawn::numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
