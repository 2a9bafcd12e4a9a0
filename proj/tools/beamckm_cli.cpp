// SPDX-License-Identifier: Apache-2.0
// Command-line front end: gen-data, train-vae, train-dit, infer, eval.

#include <CLI11.hpp>
#include <iostream>

#include "beamckm/beamckm.hpp"

namespace {

using namespace beamckm;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kMissing = 4, kInput = 5 };

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "error (" << kind << "): " << e.what() << "\n";
  return code;
}

void print_split_summary(const json& manifest) {
  std::cout << "records: " << manifest.at("records").size() << "\n";
  for (const auto& name : kSplitNames) std::cout << "  " << name << ": " << manifest.at("splits").at(name).size() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Beam-conditioned channel knowledge map generation"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  bool quiet = false;
  app.add_option("-c,--config", config_path, "JSON run configuration (defaults are used when omitted)");
  app.add_option("-s,--set", sets, "Override a config value, e.g. --set dit_train.steps=500")->take_all();
  app.add_flag("-q,--quiet", quiet, "Only print summaries");

  auto* gen = app.add_subcommand("gen-data", "Generate the oracle dataset");
  auto* tvae = app.add_subcommand("train-vae", "Pretrain the VAE on the train split");
  auto* tdit = app.add_subcommand("train-dit", "Train the condition encoder and DiT against the frozen VAE");
  std::string resume_vae, resume_dit;
  tvae->add_option("--resume", resume_vae, "Checkpoint directory to resume from");
  tdit->add_option("--resume", resume_dit, "Checkpoint directory to resume from");

  auto* inf = app.add_subcommand("infer", "Sample one map for a scene, transmitter and beam");
  InferRequest req;
  double theta = 0.0;
  inf->add_option("--scene", req.scene_id, "Scene id, e.g. scene_00")->required();
  inf->add_option("--tx", req.tx, "Transmitter index within the scene")->default_val(0);
  auto* theta_opt = inf->add_option("--theta", theta, "Steering angle in radians");
  auto* file_opt = inf->add_option("--beam-file", req.beam_file, "2*N_t interleaved reals (BCKM tensor or text)");
  theta_opt->excludes(file_opt);

  auto* ev = app.add_subcommand("eval", "Evaluate a generalization scenario");
  std::string scenario;
  ev->add_option("scenario", scenario, "unseen-beams or unseen-locations")->required();

  auto* show = app.add_subcommand("config", "Print the resolved configuration and its hashes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  std::ostream* log = quiet ? nullptr : &std::cout;
  try {
    const RunConfig cfg = load_run_config(config_path, sets);
    if (*gen) {
      const json m = generate_dataset(cfg.dataset, cfg.dataset_dir());
      std::cout << "dataset written to " << cfg.dataset_dir().string() << " (manifest " << content_hash(m) << ")\n";
      print_split_summary(m);
    } else if (*tvae) {
      const json m = train_vae(cfg, resume_vae, log);
      std::cout << "vae checkpoint " << cfg.vae_dir().string() << " step " << m.value("step", 0) << " recon mse "
                << fmt_real(m.at("recon_mse_init").get<double>()) << " -> " << fmt_real(m.at("recon_mse_final").get<double>())
                << "\n";
    } else if (*tdit) {
      const json m = train_dit(cfg, resume_dit, log);
      std::cout << "dit checkpoint " << cfg.dit_dir().string() << " final loss " << fmt_real(m.at("final_loss").get<double>())
                << "\n";
    } else if (*inf) {
      if (theta_opt->count()) req.theta = theta;
      const json r = infer(cfg, req, log);
      std::cout << "nmse_db " << fmt_real(r.at("nmse_db").get<double>()) << "\n";
    } else if (*ev) {
      const EvalReport rep = run_scenario(cfg, scenario, log);
      std::cout << scenario << ": " << rep.records.size() << " records, aggregate NMSE " << fmt_real(rep.aggregate_nmse_db)
                << " dB (mean-map baseline " << fmt_real(rep.mean_map_nmse_db) << " dB)\n";
      if (rep.failures > 0) {
        std::cerr << rep.failures << " record(s) failed to evaluate\n";
        return kFailure;
      }
    } else if (*show) {
      std::cout << to_json(cfg).dump(2) << "\n";
      std::cout << "vae_hash " << vae_hash(cfg) << "\nmodel_hash " << model_hash(cfg) << "\nrun_dir " << cfg.run_dir().string()
                << "\n";
    }
  } catch (const ConfigError& e) {
    return report("config", e, kConfig);
  } catch (const IoError& e) {
    return report("io", e, kIo);
  } catch (const std::filesystem::filesystem_error& e) {
    return report("io", e, kIo);
  } catch (const MissingDependencyError& e) {
    return report("missing dependency", e, kMissing);
  } catch (const InputValidationError& e) {
    return report("input", e, kInput);
  } catch (const std::exception& e) {
    return report("internal", e, kFailure);
  }
  return kOk;
}
