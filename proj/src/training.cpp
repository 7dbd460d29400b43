#include "dapnet/training.hpp"

#include <zlib.h>

#include <fstream>
#include <iomanip>

#include "dapnet/errors.hpp"

namespace dapnet {
namespace fs = std::filesystem;

namespace {

torch::optim::AdamOptions adam_options(double lr, double beta1, double beta2) {
  return torch::optim::AdamOptions(lr).betas({beta1, beta2}).eps(1e-8).weight_decay(0.0);
}

torch::Tensor checked(torch::Tensor loss, const char* name) {
  if (!std::isfinite(loss.item<double>())) {
    throw NumericError("non-finite loss '" + std::string(name) + "'");
  }
  return loss;
}

void set_trainable(torch::nn::Module& m, bool trainable) {
  for (auto& p : m.parameters()) p.requires_grad_(trainable);
}

// Generator-side adversarial loss. The source half rides along so batch norm
// sees the same domain mixture as in the discriminator step.
torch::Tensor adversarial_term(PatchDiscriminator& disc, const torch::Tensor& target, const torch::Tensor& source,
                               bool symmetric, const char* name) {
  const auto bt = target.size(0);
  auto scores = forward_discriminator(disc, torch::cat({target, symmetric ? source : source.detach()}, 0));
  auto loss = lsgan_g_adv_loss(scores.slice(0, 0, bt));
  if (symmetric) loss = loss + lsgan_g_adv_loss_source(scores.slice(0, bt));
  return checked(loss, name);
}

std::uint32_t crc_u32(std::uint32_t crc, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  return static_cast<std::uint32_t>(crc32(crc, b, 4));
}

void accumulate(LossBreakdown& sum, const LossBreakdown& x) {
  sum.seg_ce += x.seg_ce;
  sum.seg_dice += x.seg_dice;
  sum.adv_img_g += x.adv_img_g;
  sum.adv_feat_g += x.adv_feat_g;
  sum.d_img += x.d_img;
  sum.d_feat += x.d_feat;
  sum.total_g += x.total_g;
}

LossBreakdown scaled(LossBreakdown s, double k) {
  s.seg_ce *= k;
  s.seg_dice *= k;
  s.adv_img_g *= k;
  s.adv_feat_g *= k;
  s.d_img *= k;
  s.d_feat *= k;
  s.total_g *= k;
  return s;
}

}  // namespace

double discriminator_update(PatchDiscriminator& disc, torch::optim::Adam& opt, const torch::Tensor& target,
                            const torch::Tensor& source, const char* loss_name) {
  disc->train();
  opt.zero_grad();
  // One pass over both domains so batch norm sees them together. Target rows first.
  const auto bt = target.size(0);
  auto scores = forward_discriminator(disc, torch::cat({target.detach(), source.detach()}, 0));
  auto loss = checked(lsgan_d_loss(scores.slice(0, 0, bt), scores.slice(0, bt)), loss_name);
  loss.backward();
  opt.step();
  return loss.item<double>();
}

void configure_runtime(const ExperimentConfig& cfg) {
  if (cfg.deterministic) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/false);
  }
}

TrainState make_train_state(const ExperimentConfig& cfg) {
  TrainState s;
  s.models = init_params(cfg.seed, cfg.channel_width_scale);
  s.opt_g = std::make_unique<torch::optim::Adam>(s.models.generator->parameters(),
                                                 adam_options(cfg.base_lr, cfg.adam_beta1_g, cfg.adam_beta2_g));
  s.opt_img = std::make_unique<torch::optim::Adam>(s.models.image_disc->parameters(),
                                                   adam_options(cfg.base_lr, cfg.adam_beta1_d, cfg.adam_beta2_d));
  s.opt_feat = std::make_unique<torch::optim::Adam>(
      s.models.feature_disc->parameters(), adam_options(cfg.base_lr, cfg.adam_beta1_d, cfg.adam_beta2_d));
  s.rng.seed(cfg.seed);
  s.config_hash = config_hash(cfg);
  return s;
}

void set_learning_rate(TrainState& state, double lr) {
  for (auto* opt : {state.opt_g.get(), state.opt_img.get(), state.opt_feat.get()}) {
    for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

LossBreakdown train_step(TrainState& state, const DomainBatch& source, const DomainBatch& target,
                         const ExperimentConfig& cfg) {
  if (!source.masks.defined()) throw DataError("source batch has no masks");
  for (const auto* b : {&source, &target}) {
    if (b->images.dim() != 4 || b->images.size(2) != cfg.crop_size || b->images.size(3) != cfg.crop_size) {
      throw ShapeError("batch images must be Bx3x" + std::to_string(cfg.crop_size) + "x" +
                       std::to_string(cfg.crop_size));
    }
  }
  if (source.masks.size(0) != source.images.size(0)) throw ShapeError("source batch mask count differs");

  auto& g = state.models.generator;
  const bool adapt_img = cfg.uses_image_adaptation();
  const bool adapt_feat = cfg.uses_feature_adaptation();
  LossBreakdown out;

  // 1. Generator forward. Source first: its train-mode pass updates the
  // running statistics that the frozen-statistics target pass then reads.
  auto src = forward_segmentation(g, source.images, Mode::Train);
  auto probs = torch::softmax(src.logits, 1);
  GeneratorTerms terms;
  terms.seg_ce = checked(cross_entropy(probs, source.masks), "seg_ce");
  terms.seg_dice = checked(soft_dice_term(probs.select(1, 1), source.masks, cfg.dice_smooth), "seg_dice");

  // The discriminators compare both domains under the same frozen statistics.
  // Train-mode source features carry batch statistics the target never sees,
  // which D separates trivially.
  SegForwardOutput tgt, src_ref;
  if (adapt_img || adapt_feat) {
    tgt = forward_segmentation(g, target.images, Mode::Eval);
    {
      torch::NoGradGuard no_grad;
      src_ref = forward_segmentation(g, source.images, Mode::Eval);
    }
    g->train();
  }
  const auto& adv_src = cfg.adv_symmetric ? src : src_ref;

  // 2-3. Discriminator updates on constant generator features.
  if (adapt_img) {
    out.d_img = discriminator_update(state.models.image_disc, *state.opt_img, tgt.ppm_feature, src_ref.ppm_feature, "d_img");
  }
  if (adapt_feat) {
    out.d_feat = discriminator_update(state.models.feature_disc, *state.opt_feat, tgt.fused_feature,
                                    src_ref.fused_feature, "d_feat");
  }

  // 4. Generator update with discriminators frozen.
  if (adapt_img) {
    set_trainable(*state.models.image_disc, false);
    terms.adv_img = adversarial_term(state.models.image_disc, tgt.ppm_feature, adv_src.ppm_feature,
                                     cfg.adv_symmetric, "adv_img_g");
  }
  if (adapt_feat) {
    set_trainable(*state.models.feature_disc, false);
    terms.adv_feat = adversarial_term(state.models.feature_disc, tgt.fused_feature, adv_src.fused_feature,
                                      cfg.adv_symmetric, "adv_feat_g");
  }
  auto objective = total_generator_objective(terms, cfg);
  checked(objective.total, "total_g");
  state.opt_g->zero_grad();
  objective.total.backward();
  state.opt_g->step();
  set_trainable(*state.models.image_disc, true);
  set_trainable(*state.models.feature_disc, true);

  objective.breakdown.d_img = out.d_img;
  objective.breakdown.d_feat = out.d_feat;
  ++state.global_step;
  return objective.breakdown;
}

nlohmann::json EpochSummary::to_json() const {
  auto j = mean.to_json();
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["steps"] = steps;
  j["batch_hash"] = batch_hash;
  return j;
}

TrainResult train(const ExperimentConfig& cfg, const TrainOptions& opts) {
  if (cfg.source_manifest.empty()) throw ConfigError("invalid value for 'source_manifest': not set");
  if (cfg.target_manifest.empty()) throw ConfigError("invalid value for 'target_manifest': not set");
  const auto source = load_samples(load_manifest(cfg.source_manifest), Domain::Source, Split::Train, true);
  const auto target = load_samples(load_manifest(cfg.target_manifest), Domain::Target, Split::Train, false);
  return train(cfg, source, target, opts);
}

TrainResult train(const ExperimentConfig& cfg, const std::vector<DomainSample>& source,
                  const std::vector<DomainSample>& target, const TrainOptions& opts) {
  configure_runtime(cfg);
  std::error_code ec;
  fs::create_directories(opts.run_dir, ec);
  if (ec) throw std::runtime_error("cannot create run directory " + opts.run_dir.string() + ": " + ec.message());

  TrainResult result;
  if (opts.resume_from) {
    auto loaded = load_checkpoint(*opts.resume_from);
    if (loaded.state.config_hash != config_hash(cfg)) {
      throw CheckpointError("checkpoint config hash does not match the running config: " +
                            opts.resume_from->string());
    }
    result.state = std::move(loaded.state);
  } else {
    result.state = make_train_state(cfg);
  }
  TrainState& state = result.state;

  result.step_log = opts.run_dir / "train_log.jsonl";
  result.epoch_log = opts.run_dir / "epochs.jsonl";
  const auto mode = opts.resume_from ? std::ios::app : std::ios::trunc;
  std::ofstream step_log(result.step_log, mode);
  std::ofstream epoch_log(result.epoch_log, mode);
  if (!step_log || !epoch_log) throw std::runtime_error("cannot write logs under " + opts.run_dir.string());

  const int last_epoch = std::min(cfg.total_epochs, opts.stop_after_epoch.value_or(cfg.total_epochs));
  std::uint32_t sequence_crc = 0;
  nlohmann::json last_summary = nlohmann::json::object();
  for (int epoch = state.epoch; epoch < last_epoch; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    set_learning_rate(state, lr);
    PairedBatchIterator batches(source, target, cfg, state.rng);
    EpochSummary summary;
    summary.epoch = epoch;
    summary.lr = lr;
    LossBreakdown sum;
    while (auto pair = batches.next()) {
      const auto& [src, tgt] = *pair;
      const auto src_hash = src.hash();
      const auto tgt_hash = tgt.hash();
      const auto losses = train_step(state, src, tgt, cfg);
      accumulate(sum, losses);
      ++summary.steps;
      summary.batch_hash = crc_u32(crc_u32(summary.batch_hash, src_hash), tgt_hash);
      sequence_crc = crc_u32(crc_u32(sequence_crc, src_hash), tgt_hash);

      auto line = losses.to_json();
      line["step"] = state.global_step;
      line["epoch"] = epoch;
      line["lr"] = lr;
      line["source_batch"] = src_hash;
      line["target_batch"] = tgt_hash;
      step_log << line.dump() << '\n';
    }
    summary.mean = scaled(sum, 1.0 / static_cast<double>(std::max<std::size_t>(summary.steps, 1)));
    state.epoch = epoch + 1;
    last_summary = summary.to_json();
    epoch_log << last_summary.dump() << '\n';
    step_log.flush();
    epoch_log.flush();
    result.epochs.push_back(summary);
    if (opts.progress) {
      *opts.progress << "epoch " << epoch << " lr " << lr << " seg_ce " << summary.mean.seg_ce << " total_g "
                     << summary.mean.total_g << " d_img " << summary.mean.d_img << " d_feat "
                     << summary.mean.d_feat << std::endl;
    }
    if (state.epoch % cfg.checkpoint_every == 0 && state.epoch < last_epoch) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_epoch%04d.dapn", state.epoch);
      save_checkpoint(state, cfg, opts.run_dir / name, last_summary);
    }
  }
  result.final_checkpoint = opts.run_dir / "final.dapn";
  save_checkpoint(state, cfg, result.final_checkpoint, last_summary);
  result.batch_sequence_hash = sequence_crc;
  return result;
}

std::vector<AblationEntry> run_ablation(const ExperimentConfig& cfg, const fs::path& out_dir,
                                        std::ostream* progress) {
  if (cfg.source_manifest.empty() || cfg.target_manifest.empty()) {
    throw ConfigError("invalid value for 'source_manifest'/'target_manifest': both must be set");
  }
  const auto source_manifest = load_manifest(cfg.source_manifest);
  const auto target_manifest = load_manifest(cfg.target_manifest);
  const auto source_train = load_samples(source_manifest, Domain::Source, Split::Train, true);
  const auto target_train = load_samples(target_manifest, Domain::Target, Split::Train, false);
  const auto source_test = load_samples(source_manifest, Domain::Source, Split::Test, true);
  const auto target_test = load_samples(target_manifest, Domain::Target, Split::Test, true);

  std::vector<AblationEntry> entries;
  for (Variant v : {Variant::NA, Variant::IA, Variant::FA, Variant::FULL}) {
    ExperimentConfig vcfg = cfg;
    vcfg.variant = v;
    const auto run_dir = out_dir / std::string(to_string(v));
    if (progress) *progress << "== variant " << to_string(v) << std::endl;
    TrainOptions opts;
    opts.run_dir = run_dir;
    opts.progress = progress;
    auto trained = train(vcfg, source_train, target_train, opts);
    AblationEntry e;
    e.variant = v;
    e.batch_sequence_hash = trained.batch_sequence_hash;
    e.source = evaluate_dataset(trained.state.models.generator, source_test, vcfg, "source_test");
    e.target = evaluate_dataset(trained.state.models.generator, target_test, vcfg, "target_test");
    write_report(e.source, run_dir / "report_source_test.json");
    write_report(e.target, run_dir / "report_target_test.json");
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace dapnet
