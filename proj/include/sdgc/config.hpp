#pragma once

// Line-oriented experiment configuration: `section.key = value`, `#` comments.
// Every key has a default; unknown keys are rejected.

#include <map>
#include <string>
#include <vector>

#include "sdgc/channel.hpp"
#include "sdgc/nets.hpp"
#include "sdgc/psd_denoiser.hpp"

namespace sdgc::config {

struct ExperimentConfig {
  // dataset
  std::string dataset_kind = "synthetic";  // synthetic | ppm-dir
  std::string dataset_dir;
  int64_t dataset_count = 2000;
  int64_t height = 32;
  int64_t width = 32;
  double heldout_fraction = 0.1;

  nets::CodecConfig codec;  // dims filled from dataset fields on resolve()

  // schedule
  int64_t schedule_T = 200;
  double beta1 = 5e-4;
  double betaT = 0.1;

  // latent diffusion training
  int64_t diffusion_steps = 4000;
  int64_t diffusion_batch = 64;
  double diffusion_lr = 1e-3;
  double diffusion_momentum = 0.9;
  std::vector<int64_t> predictor_hidden = {256, 256};
  int64_t time_dim = 32;

  // channel prior training
  int64_t chprior_steps = 3000;
  int64_t chprior_batch = 64;
  int64_t chprior_samples = 4096;

  // channel
  ChannelMode channel_mode = ChannelMode::SparseConv;
  int64_t channel_taps = 16;
  int64_t channel_sparsity = 3;
  int channel_pilots = 4;

  // guidance (known-channel denoiser)
  sd::GuidanceConfig guidance;

  // psd
  psd::PsdConfig psd;

  // decoder fine-tuning
  int64_t finetune_pairs = 512;
  int finetune_epochs = 3;
  double finetune_lr = 5e-4;
  double finetune_snr_db = 10.0;

  // sweep
  std::vector<double> sweep_snrs = {0, 5, 10, 15, 20};
  int64_t sweep_runs = 200;
  std::vector<std::string> sweep_methods = {"sd", "psd", "msd", "mmse-only", "uncond-ablation"};

  uint64_t master_seed = 12345;
  int threads = 1;

  void resolve();  // fills codec dims from dataset fields
  void validate() const;

  SparseChannelSpec sparse_spec() const {
    SparseChannelSpec s;
    s.taps = channel_taps;
    s.active = channel_sparsity;
    return s;
  }

  // canonical `key = value` dump of selected sections (sorted), for digests
  std::string canonical(const std::vector<std::string>& sections) const;
  uint64_t digest(const std::vector<std::string>& sections) const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string default_config_text();

}  // namespace sdgc::config
