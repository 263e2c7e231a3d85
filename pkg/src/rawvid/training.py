"""Stage-wise training (pre-denoiser, learned ISP, denoiser pretrain/finetune), evaluation, ablation."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import yaml

from .data import PAIR_MODES, VideoSource, sample_temporal_pair, sample_window
from .errors import ConfigurationError, DependencyError, DimensionError, MetadataError
from .isp import ReferenceISPConfig, reference_isp_forward
from .losses import FINETUNE, PRETRAIN, LossWeights, compute_loss, l1
from .metrics import metrics
from .nets.rvidenet import RViDeNet, RViDeNetConfig
from .nets.unet import LearnedISP, Predenoiser, UNetSpec, freeze, is_frozen
from .raw import TEMPORAL_RADIUS, BayerFrame, pack_array, unpack_array

STAGES = ("predenoise", "isp", "pretrain_synthetic", "finetune_real")
DENOISER_STAGES = ("pretrain_synthetic", "finetune_real")
STAGE_LR = {"predenoise": 1e-4, "isp": 1e-4, "pretrain_synthetic": 1e-4, "finetune_real": 1e-6}
FINETUNE_SPATIAL_LR = 1e-5
SCHEDULES = ("constant", "cosine")
CHECKPOINT_FORMAT = "rawvid-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain_synthetic"
    patch_size: int = 64
    batch_size: int = 1
    lr: float | None = None  # None: stage default
    lr_spatial: float | None = None  # None: lr, or the finetune override
    epochs: int = 1
    steps_per_epoch: int = 100
    seed: int = 0
    raw_domain: bool = True
    packing: bool = True
    predenoise_guided: bool = True
    nonlocal_attention: bool = True
    channels: int = 16
    res_blocks: int = 10
    lam: float | None = None  # None: stage default
    beta: float | None = None
    gamma: float | None = None
    pair_mode: str = "realizations"
    unet_depth: int = 4
    unet_base: int = 32
    isp_depth: int = 2
    isp_base: int = 16
    log_every: int = 1
    schedule: str = "constant"  # or "cosine": anneal every group to zero over the run

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.patch_size % 2 or self.patch_size < 2:
            raise ConfigurationError(f"patch_size must be even, got {self.patch_size}")
        lr, lr_s = self.learning_rates()
        if not (lr > 0 and lr_s > 0):
            raise ConfigurationError("learning rates must be positive")
        if min(self.batch_size, self.epochs, self.steps_per_epoch, self.log_every) < 1:
            raise ConfigurationError("batch_size, epochs, steps_per_epoch and log_every must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.pair_mode not in PAIR_MODES:
            raise ConfigurationError(f"pair_mode must be one of {PAIR_MODES}")
        w = self.weights()
        if not self.raw_domain and w.lam > 0:
            raise ConfigurationError("the temporal loss is raw-domain only; disable it for sRGB-domain models")
        try:
            self.model_config()
        except ConfigurationError:
            raise
        except Exception as e:  # noqa: BLE001 - surface as a config problem
            raise ConfigurationError(str(e)) from e

    def learning_rates(self):
        lr = self.lr if self.lr is not None else STAGE_LR[self.stage]
        if self.lr_spatial is not None:
            return lr, self.lr_spatial
        if self.stage == "finetune_real" and self.lr is None:
            return lr, FINETUNE_SPATIAL_LR
        return lr, lr

    def weights(self) -> LossWeights:
        base = FINETUNE if self.stage == "finetune_real" else PRETRAIN
        return LossWeights(
            base.lam if self.lam is None else self.lam,
            base.beta if self.beta is None else self.beta,
            base.gamma if self.gamma is None else self.gamma,
        )

    def model_config(self) -> RViDeNetConfig:
        return RViDeNetConfig(
            channels=self.channels, res_blocks=self.res_blocks, packing=self.packing,
            predenoise=self.predenoise_guided, nonlocal_attention=self.nonlocal_attention,
            raw_domain=self.raw_domain,
        )

    def predenoiser_spec(self):
        return UNetSpec(self.unet_depth, self.unet_base)

    def isp_spec(self):
        return UNetSpec(self.isp_depth, self.isp_base, 4, 12)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: expected a mapping")
        return cls.from_dict(doc.get("train", doc))


@dataclass
class ModelState:
    model: nn.Module
    optimizer: torch.optim.Optimizer | None
    stage: str
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    log: list = field(default_factory=list)


# -- construction -------------------------------------------------------------


def seed_everything(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(seed)


def build_denoiser(config: TrainConfig, predenoiser=None, isp=None):
    """RViDeNet with the frozen helpers it needs; raises DependencyError if one is missing."""
    cfg = config.model_config()
    if cfg.predenoise and predenoiser is None:
        raise DependencyError("denoiser stages with pre-denoising need a trained pre-denoiser")
    if isp is None:
        raise DependencyError("denoiser stages need a trained learned ISP for sRGB outputs")
    return RViDeNet(cfg, freeze(predenoiser) if cfg.predenoise else None, freeze(isp))


def trainable_parameters(model):
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(model, config: TrainConfig):
    lr, lr_spatial = config.learning_rates()
    if isinstance(model, RViDeNet):
        spatial = {id(p) for p in model.spatial.parameters()}
        groups = [
            {"params": [p for p in trainable_parameters(model) if id(p) not in spatial], "lr": lr, "name": "base"},
            {"params": [p for p in model.spatial.parameters() if p.requires_grad], "lr": lr_spatial,
             "name": "spatial_fusion"},
        ]
    else:
        groups = [{"params": trainable_parameters(model), "lr": lr, "name": "base"}]
    return torch.optim.Adam(groups)


def _current_lrs(optimizer):
    lrs = {g.get("name", "base"): g["lr"] for g in optimizer.param_groups}
    return lrs["base"], lrs.get("spatial_fusion", lrs["base"])


def parameter_checksum(module):
    """SHA-256 over every parameter and buffer's exact bytes, in name order."""
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# -- batches ------------------------------------------------------------------


def _tensor(x):
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)


def _choose(sources, rng):
    return sources[int(rng.integers(0, len(sources)))]


def _reference_srgb(source, cache, isp_config):
    key = id(source)
    if key not in cache:
        cache[key] = np.stack([reference_isp_forward(BayerFrame(f, source.pattern, normalized=True), isp_config).data
                               for f in source.clean])
    return cache[key]


def _check_pattern(sources):
    patterns = {s.pattern for s in sources}
    if len(patterns) != 1:
        raise ConfigurationError(f"mixed Bayer patterns in one run: {sorted(patterns)}")
    return patterns.pop()


# -- stage steps ----------------------------------------------------------------


def _predenoise_step(model, sources, rng, config, pattern, _ctx):
    noisy, clean = [], []
    for _ in range(config.batch_size):
        b = sample_window(_choose(sources, rng), rng, config.patch_size)
        noisy.append(pack_array(b["noisy"][TEMPORAL_RADIUS], pattern))
        clean.append(pack_array(b["clean"], pattern))
    out = model(_tensor(np.stack(noisy)))
    loss = l1(out, _tensor(np.stack(clean)))
    return loss, {"raw": loss.item(), "total": loss.item()}


def _isp_step(model, sources, rng, config, pattern, ctx):
    raw, srgb = [], []
    for _ in range(config.batch_size):
        src = _choose(sources, rng)
        b = sample_window(src, rng, config.patch_size)
        y, x, p = b["window"]
        raw.append(pack_array(b["clean"], pattern))
        srgb.append(_reference_srgb(src, ctx["srgb_cache"], ctx["isp_config"])[b["t"], :, y:y + p, x:x + p])
    out = model(_tensor(np.stack(raw)))
    loss = l1(out, _tensor(np.stack(srgb)))
    return loss, {"srgb": loss.item(), "total": loss.item()}


def to_srgb_batch(model: RViDeNet, raw, pattern):
    """Frozen learned ISP on (B, 2H, 2W) raw."""
    return model.to_srgb(raw, pattern)


def _srgb_frames(model, frames, pattern):
    # (B, T, 2H, 2W) raw -> (B, T, 3, 2H, 2W) through the frozen ISP
    b, t = frames.shape[:2]
    with torch.no_grad():
        out = model.to_srgb(frames.flatten(0, 1), pattern)
    return out.view(b, t, *out.shape[1:])


def _denoiser_step(model, sources, rng, config, pattern, ctx):
    w = ctx["weights"]
    if w.lam > 0:
        pairs = [sample_temporal_pair(_choose(sources, rng), rng, config.patch_size, config.pair_mode)
                 for _ in range(config.batch_size)]
        n1 = _tensor(np.stack([p["noisy_1"] for p in pairs]))
        n2 = _tensor(np.stack([p["noisy_2"] for p in pairs]))
        clean = _tensor(np.stack([p["clean"] for p in pairs]))
        o1 = model(n1, pattern)
        o2 = model(n2, pattern)
        outputs = {"raw": o1, "raw_1": o1, "raw_2": o2}
    else:
        batch = [sample_window(_choose(sources, rng), rng, config.patch_size) for _ in range(config.batch_size)]
        noisy = _tensor(np.stack([b["noisy"] for b in batch]))
        clean = _tensor(np.stack([b["clean"] for b in batch]))
        if not model.config.raw_domain:
            target = _srgb_frames(model, clean[:, None], pattern)[:, 0]
            out = model(_srgb_frames(model, noisy, pattern))
            loss = l1(out, target)
            return loss, {"srgb": loss.item(), "total": loss.item()}
        outputs = {"raw": model(noisy, pattern)}
    targets = {"raw": clean}
    if w.beta > 0:
        outputs["srgb"] = model.to_srgb(outputs["raw"], pattern)
        with torch.no_grad():
            targets["srgb"] = model.to_srgb(clean, pattern)
    return compute_loss(outputs, targets, w)


STEPS = {"predenoise": _predenoise_step, "isp": _isp_step,
         "pretrain_synthetic": _denoiser_step, "finetune_real": _denoiser_step}


# -- training loop --------------------------------------------------------------


def train(config: TrainConfig, sources, model=None, predenoiser=None, isp=None, log_path=None,
          checkpoint_dir=None, isp_config: ReferenceISPConfig = ReferenceISPConfig()) -> ModelState:
    """Run one stage. ``model`` continues an existing network (e.g. finetuning a pretrained denoiser)."""
    if not sources:
        raise ConfigurationError("no training data")
    pattern = _check_pattern(sources)
    rng = seed_everything(config.seed)
    if config.stage == "predenoise":
        model = model or Predenoiser(config.predenoiser_spec())
    elif config.stage == "isp":
        model = model or LearnedISP(config.isp_spec())
    elif model is None:
        model = build_denoiser(config, predenoiser, isp)
    else:
        if model.config != config.model_config():
            raise ConfigurationError("model architecture differs from the training config flags")
        if model.config.predenoise and model.predenoiser is None or model.isp is None:
            raise DependencyError("continued denoiser is missing its frozen helpers")
    if isinstance(model, RViDeNet):
        for helper in (model.predenoiser, model.isp):
            if helper is not None and not is_frozen(helper):
                freeze(helper)
    model.train()
    for helper in (getattr(model, "predenoiser", None), getattr(model, "isp", None)):
        if helper is not None:
            helper.eval()
    optimizer = make_optimizer(model, config)
    total_steps = config.epochs * config.steps_per_epoch
    scheduler = (torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, total_steps)
                 if config.schedule == "cosine" else None)
    state = ModelState(model, optimizer, config.stage, config)
    weights = config.weights()
    ctx = {"weights": weights, "srgb_cache": {}, "isp_config": isp_config}
    step_fn = STEPS[config.stage]
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            for _ in range(config.steps_per_epoch):
                loss, terms = step_fn(model, sources, rng, config, pattern, ctx)
                optimizer.zero_grad()
                loss.backward()
                lr, lr_spatial = _current_lrs(optimizer)
                optimizer.step()
                if scheduler is not None:
                    scheduler.step()
                state.step += 1
                if state.step % config.log_every == 0 or state.step == total_steps:
                    record = {"step": state.step, "epoch": epoch, "stage": config.stage, "lr": lr,
                              "lr_spatial": lr_spatial, "weights": weights.to_dict(), "loss": terms}
                    state.log.append(record)
                    if log_file:
                        log_file.write(json.dumps(record, sort_keys=True) + "\n")
            state.epoch = epoch + 1
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir)
                path.mkdir(parents=True, exist_ok=True)
                save_checkpoint(state, path / f"{config.stage}_epoch{state.epoch:03d}.pt")
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return state


def final_loss(state: ModelState):
    return state.log[-1]["loss"]["total"] if state.log else math.nan


# -- checkpoints ----------------------------------------------------------------


def _kind(model):
    if isinstance(model, RViDeNet):
        return "rvidenet"
    if isinstance(model, Predenoiser):
        return "predenoiser"
    if isinstance(model, LearnedISP):
        return "isp"
    raise ConfigurationError(f"cannot checkpoint {type(model).__name__}")


def checkpoint_header(state: ModelState):
    model = state.model
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": _kind(model),
              "stage": state.stage, "epoch": state.epoch, "step": state.step, "optimizer": "Adam",
              "train_config": state.config.to_dict()}
    if isinstance(model, RViDeNet):
        header["model_config"] = model.config.to_dict()
        header["predenoiser_spec"] = model.predenoiser.spec.to_dict() if model.predenoiser is not None else None
        header["isp_spec"] = model.isp.spec.to_dict() if model.isp is not None else None
    else:
        header["spec"] = model.spec.to_dict()
    return header


def save_checkpoint(state: ModelState, path):
    payload = {"header": checkpoint_header(state), "state_dict": state.model.state_dict()}
    if state.optimizer is not None:
        payload["optimizer_state"] = state.optimizer.state_dict()
    torch.save(payload, path)
    return path


def read_header(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # noqa: BLE001 - any unreadable file is a metadata problem
        raise MetadataError(f"cannot read checkpoint {path}: {e}") from e
    header = payload.get("header") if isinstance(payload, dict) else None
    if not header or header.get("format") != CHECKPOINT_FORMAT:
        raise MetadataError(f"{path} is not a rawvid checkpoint")
    if header["version"] > CHECKPOINT_VERSION:
        raise MetadataError(f"{path}: checkpoint version {header['version']} is newer than supported")
    return header, payload


def load_checkpoint(path, kind=None):
    """Rebuild the network stored at ``path``; helpers of a denoiser come back frozen."""
    header, payload = read_header(path)
    if kind is not None and header["kind"] != kind:
        raise ConfigurationError(f"{path} holds a {header['kind']} checkpoint, expected {kind}")
    if header["kind"] == "predenoiser":
        model = Predenoiser(UNetSpec(**header["spec"]))
    elif header["kind"] == "isp":
        model = LearnedISP(UNetSpec(**header["spec"]))
    else:
        pre = Predenoiser(UNetSpec(**header["predenoiser_spec"])) if header["predenoiser_spec"] else None
        isp = LearnedISP(UNetSpec(**header["isp_spec"])) if header["isp_spec"] else None
        model = RViDeNet(RViDeNetConfig(**header["model_config"]),
                         freeze(pre) if pre is not None else None, freeze(isp) if isp is not None else None)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    if header["kind"] in ("predenoiser", "isp"):
        freeze(model)
    state = ModelState(model, None, header["stage"], TrainConfig.from_dict(header["train_config"]),
                       header["epoch"], header["step"])
    return state


# -- evaluation -----------------------------------------------------------------

EVAL_MARGIN = 8  # full-resolution pixels of reflect padding; even keeps the Bayer phase


def _reflect_pad(frames, margin):
    if margin == 0:
        return frames
    return np.pad(frames, [(0, 0)] * (frames.ndim - 2) + [(margin, margin)] * 2, mode="reflect")


def denoise_sequence(model: RViDeNet, noisy, pattern="RGGB", margin=EVAL_MARGIN):
    """Denoise every centre with full temporal context. Returns (centres, raw outputs or None, sRGB outputs)."""
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.ndim != 3:
        raise DimensionError(f"expected (T, 2H, 2W) raw frames, got {noisy.shape}")
    r = model.config.frames // 2
    if noisy.shape[0] < 2 * r + 1:
        raise DimensionError(f"sequence of {noisy.shape[0]} frames is shorter than one {2 * r + 1}-frame window")
    if margin % 2:
        raise ConfigurationError("evaluation margin must be even to keep the Bayer phase")
    h, w = noisy.shape[-2:]
    padded = _reflect_pad(noisy, margin)
    centres = list(range(r, noisy.shape[0] - r))
    raw_out, srgb_out = [], []
    model.eval()
    with torch.no_grad():
        for t in centres:
            window = _tensor(padded[t - r:t + r + 1])[None]
            if model.config.raw_domain:
                out = model(window, pattern)
                raw = out[0, margin:margin + h, margin:margin + w]
                raw_out.append(raw.double().numpy())
                srgb_out.append(model.to_srgb(raw[None], pattern)[0].double().numpy() if model.isp else None)
            else:
                out = model(_srgb_frames(model, window, pattern)).clamp(0, 1)
                srgb_out.append(out[0, :, margin:margin + h, margin:margin + w].double().numpy())
    return centres, (np.stack(raw_out) if raw_out else None), srgb_out


def evaluate_sequence(model: RViDeNet, noisy, clean=None, pattern="RGGB", margin=EVAL_MARGIN):
    """Per-frame and mean raw/sRGB metrics plus the output frames."""
    centres, raw_out, srgb_out = denoise_sequence(model, noisy, pattern, margin)
    report = {"centres": centres, "margin": margin, "frames": [], "raw_outputs": raw_out, "srgb_outputs": srgb_out}
    if clean is None:
        return report
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != np.asarray(noisy).shape:
        raise DimensionError("clean and noisy sequences differ in shape")
    for i, t in enumerate(centres):
        entry = {"t": t}
        if raw_out is not None:
            entry["raw"] = metrics(raw_out[i], clean[t], "raw")
            entry["noisy_raw"] = metrics(np.asarray(noisy)[t], clean[t], "raw")
        if srgb_out[i] is not None:
            with torch.no_grad():
                target = model.to_srgb(_tensor(clean[t])[None], pattern)[0].double().numpy()
            entry["srgb"] = metrics(srgb_out[i], target, "srgb")
        report["frames"].append(entry)
    for domain in ("raw", "noisy_raw", "srgb"):
        vals = [f[domain] for f in report["frames"] if domain in f]
        if vals:
            report[domain] = {k: float(np.mean([v[k] for v in vals])) for k in ("psnr", "ssim")}
    return report


def consistency_gap(model: RViDeNet, source: VideoSource, seed=0, mode="realizations"):
    """Mean L1 between the two estimates of each centre frame from independent noisy windows."""
    rng = np.random.default_rng(seed)
    r = model.config.frames // 2
    win = source.full_window()
    gaps = []
    model.eval()
    with torch.no_grad():
        for t in range(r, source.frames - r):
            if mode == "realizations":
                frames = list(range(t - r, t + r + 1))
                w1, w2 = source.draw(rng, frames, win, 0), source.draw(rng, frames, win, 1)
            else:
                takes = np.stack([source.draw(rng, [t], win, i)[0] for i in range(2 * r + 2)])
                w1, w2 = takes[:-1], takes[1:]
            o1 = model(_tensor(w1)[None], source.pattern)
            o2 = model(_tensor(w2)[None], source.pattern)
            gaps.append(float(l1(o1, o2)))
    return float(np.mean(gaps))


# -- ablation -------------------------------------------------------------------

ABLATION_LADDER = (
    ("srgb_domain", dict(raw_domain=False, packing=False, predenoise_guided=False, nonlocal_attention=False)),
    ("raw_domain", dict(raw_domain=True, packing=False, predenoise_guided=False, nonlocal_attention=False)),
    ("packing", dict(raw_domain=True, packing=True, predenoise_guided=False, nonlocal_attention=False)),
    ("predenoise", dict(raw_domain=True, packing=True, predenoise_guided=True, nonlocal_attention=False)),
    ("full", dict(raw_domain=True, packing=True, predenoise_guided=True, nonlocal_attention=True)),
)


def run_ablation(base: TrainConfig, sources, eval_sources, predenoiser, isp, log_dir=None):
    """Train and score every rung of the cumulative ablation ladder."""
    rows = []
    for name, flags in ABLATION_LADDER:
        cfg = replace(base, stage="pretrain_synthetic", lam=0.0, beta=0.0, gamma=0.0, **flags)
        log_path = Path(log_dir) / f"ablation_{name}.jsonl" if log_dir else None
        state = train(cfg, sources, predenoiser=predenoiser, isp=isp, log_path=log_path)
        model = state.model
        raw_scores, srgb_scores = [], []
        for i, src in enumerate(eval_sources):
            noisy = src.noisy[0] if src.noisy else src.draw(np.random.default_rng(base.seed + 1000 + i),
                                                            list(range(src.frames)), src.full_window())
            rep = evaluate_sequence(model, noisy, src.clean, src.pattern)
            if "raw" in rep:
                raw_scores.append(rep["raw"])
            srgb_scores.append(rep["srgb"])

        def mean(scores):
            return {k: float(np.mean([s[k] for s in scores])) for k in ("psnr", "ssim")} if scores else None

        rows.append({
            "name": name,
            "flags": {k: bool(v) for k, v in flags.items()},
            "feature_channels": model.config.feature_channels,
            "parameters": sum(p.numel() for p in trainable_parameters(model)),
            "final_loss": final_loss(state),
            "raw": mean(raw_scores),
            "srgb": mean(srgb_scores),
        })
    return {"format": "rawvid-ablation", "version": 1, "base_config": base.to_dict(), "rows": rows}


def format_table(report):
    """Plain-text table of an ablation report."""
    cols = ("name", "raw_domain", "packing", "predenoise", "nonlocal", "raw PSNR", "raw SSIM", "sRGB PSNR", "sRGB SSIM")
    lines = ["  ".join(f"{c:>10}" for c in cols)]
    for row in report["rows"]:
        f = row["flags"]
        cells = [row["name"], *("x" if f[k] else "-" for k in ("raw_domain", "packing", "predenoise_guided",
                                                                  "nonlocal_attention"))]
        for dom in ("raw", "srgb"):
            s = row[dom]
            cells += [f"{s['psnr']:.2f}", f"{s['ssim']:.4f}"] if s else ["-", "-"]
        lines.append("  ".join(f"{c:>10}" for c in cells))
    return "\n".join(lines)
