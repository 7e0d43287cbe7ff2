"""Sequential training of the four networks.

Order: first DOA net (BCE, multi-hot angle+VAD targets), first mask net
(MSE against the ideal mask of the speaker nearest the conditioning DOA),
second DOA net (CE, one-hot single-speaker targets, inputs multiplied by
the remainder mask), second mask net (MSE, masked beamformed inputs).
Upstream networks stay frozen. Mask nets are conditioned on true DOAs
perturbed with probability p_aug by uniform +-aug_eps_deg noise so they
tolerate localization errors at separation time.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, scenes
from .errors import ConfigError, ValidationError
from .features import Mask, beamformed_features, csipd, magnitude, mask_features
from .localization import DoaGrid, doa_targets, pool_posterior
from .models import (
    DoaNet,
    DoaNetConfig,
    MaskNet,
    MaskNetConfig,
    assemble_doa_inputs,
    assemble_mask_inputs,
    doa_net_forward,
    load_net,
    mask_net_forward,
    save_net,
)
from .neural import Adam, bce_loss, ce_loss, mse_loss
from .rooms import ArrayGeometry

STAGES = ("doa1", "mask1", "doa2", "mask2")


@dataclass
class TrainConfig:
    hidden: int = 32
    lr: float = 1e-3
    max_epochs: int = 15
    patience: int = 5
    p_aug: float = 0.5
    aug_eps_deg: float = 10.0
    dropout_p: float = 0.3
    seed: int = 0
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)


class SceneStore:
    """Manifest access with caching of the small derived truth tensors."""

    def __init__(self, manifest_path, stft_cfg, geometry):
        self.manifest_path = Path(manifest_path)
        self.stft_cfg = stft_cfg
        self.geometry = geometry
        self.records = scenes.load_manifest(manifest_path)
        self._truth = {}

    def split(self, name):
        return [r for r in self.records if r["split"] == name]

    def mixture_spec(self, rec):
        root = self.manifest_path.parent
        mixture = dsp.read_wav(root / rec["mixture_path"])
        return dsp.stft(mixture, self.stft_cfg)

    def truth_tf(self, rec):
        """(doas_deg, vad (spk, frames), ideal masks) for one scene."""
        key = rec["id"]
        if key not in self._truth:
            mixture, truth = scenes.load_scene(self.manifest_path, rec, self.stft_cfg)
            masks = [m.values.astype(np.float32) for m in truth.ideal_masks]
            self._truth[key] = (list(truth.doas_deg), truth.vad.copy(), masks)
        doas, vad, masks = self._truth[key]
        return doas, vad, [Mask(m.astype(np.float64)) for m in masks]


class FrozenStack:
    """Inference through already-trained stages, cached per scene."""

    def __init__(self, store, doa1=None, mask1=None, doa2=None):
        self.store = store
        self.doa1 = doa1
        self.mask1 = mask1
        self.doa2 = doa2
        self._cache = {}

    def _entry(self, rec):
        return self._cache.setdefault(rec["id"], {})

    def features(self, rec):
        spec = self.store.mixture_spec(rec)
        return spec, csipd(spec), magnitude(spec)

    def step1(self, rec, spec=None, phase=None, mag=None):
        """First posterior and pooled DOA estimate."""
        e = self._entry(rec)
        if "p1" not in e:
            if spec is None:
                spec, phase, mag = self.features(rec)
            post = doa_net_forward(self.doa1, phase, mag)
            e["p1"] = post.probs.astype(np.float32)
            e["doa1_est"] = pool_posterior(post)
        from .localization import DoaPosterior

        return DoaPosterior(e["p1"].astype(np.float64)), e["doa1_est"]

    def first_mask(self, rec, spec=None, phase=None, mag=None):
        e = self._entry(rec)
        if "m1" not in e:
            if spec is None:
                spec, phase, mag = self.features(rec)
            p1, doa1_est = self.step1(rec, spec, phase, mag)
            bf = beamformed_features(spec, doa1_est, self.store.geometry)
            m1 = mask_net_forward(self.mask1, bf, p1)
            e["m1"] = m1.values.astype(np.float32)
        return Mask(e["m1"].astype(np.float64))


def _perturb_doa(doa, rng, cfg):
    if rng.random() < cfg.p_aug:
        doa = doa + rng.uniform(-cfg.aug_eps_deg, cfg.aug_eps_deg)
    return float(np.clip(doa, 0.0, 180.0))


def _nearest_speaker(doas, cond_doa):
    """Index of the speaker whose true DOA is nearest (tie -> lower index)."""
    err = np.abs(np.asarray(doas) - cond_doa)
    return int(np.argmin(err))


def make_example_doa1(store, stack, rec, rng, cfg, grid):
    spec, phase, mag = stack.features(rec)
    doas, vad, _ = store.truth_tf(rec)
    target = doa_targets(doas, vad, grid)
    return assemble_doa_inputs(phase, mag), target


def make_example_mask1(store, stack, rec, rng, cfg, grid):
    spec, phase, mag = stack.features(rec)
    doas, vad, masks = store.truth_tf(rec)
    j = int(rng.integers(len(doas)))
    cond = _perturb_doa(doas[j], rng, cfg)
    p1, _ = stack.step1(rec, spec, phase, mag)
    bf = beamformed_features(spec, cond, store.geometry)
    target_idx = _nearest_speaker(doas, cond)
    return (assemble_mask_inputs(bf, p1),), masks[target_idx].values


def make_example_doa2(store, stack, rec, rng, cfg, grid):
    spec, phase, mag = stack.features(rec)
    doas, vad, _ = store.truth_tf(rec)
    _, doa1_est = stack.step1(rec, spec, phase, mag)
    m1 = stack.first_mask(rec, spec, phase, mag)
    remainder = m1.remainder()
    phase_m = mask_features(phase, remainder)
    mag_m = mask_features(mag, remainder)
    second = 1 - _nearest_speaker(doas, doa1_est)
    target = doa_targets([doas[second]], vad[second : second + 1], grid)
    return assemble_doa_inputs(phase_m, mag_m), target


def make_example_mask2(store, stack, rec, rng, cfg, grid):
    spec, phase, mag = stack.features(rec)
    doas, vad, masks = store.truth_tf(rec)
    _, doa1_est = stack.step1(rec, spec, phase, mag)
    m1 = stack.first_mask(rec, spec, phase, mag)
    remainder = m1.remainder()
    second = 1 - _nearest_speaker(doas, doa1_est)
    cond = _perturb_doa(doas[second], rng, cfg)
    phase_m = mask_features(phase, remainder)
    mag_m = mask_features(mag, remainder)
    p2 = doa_net_forward(stack.doa2, phase_m, mag_m)
    bf2 = mask_features(beamformed_features(spec, cond, store.geometry), remainder)
    target_idx = _nearest_speaker(doas, cond)
    return (assemble_mask_inputs(bf2, p2),), masks[target_idx].values


_STAGE_RECIPES = {
    "doa1": (make_example_doa1, bce_loss),
    "mask1": (make_example_mask1, mse_loss),
    "doa2": (make_example_doa2, ce_loss),
    "mask2": (make_example_mask2, mse_loss),
}


def train_stage(stage, net, store, stack, cfg, log=None):
    """Train one network with early stopping; returns the history dict.

    Dev loss is evaluated with augmentation disabled and a fixed rng, and
    the best parameters (including the untrained init) are restored at the
    end.
    """
    make_example, loss_fn = _STAGE_RECIPES[stage]
    grid = DoaGrid()
    train_recs = store.split("train")
    dev_recs = store.split("dev")
    if not train_recs or not dev_recs:
        raise ValidationError("manifest needs non-empty train and dev splits")
    opt = Adam(lr=cfg.lr)

    def dev_loss():
        total = 0.0
        no_aug = TrainConfig(**{**cfg.__dict__, "p_aug": 0.0})
        for rec in dev_recs:
            rng = np.random.default_rng([cfg.seed, 0xDE7, _stable_id(rec)])
            inputs, target = make_example(store, stack, rec, rng, no_aug, grid)
            out = net.forward(*inputs, train=False)
            total += loss_fn(out, target)[0]
        return total / len(dev_recs)

    history = {"stage": stage, "epochs": [], "dev_loss": []}
    best_loss = dev_loss()
    best_params = net.copy_params()
    history["dev_loss"].append(best_loss)
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, _stage_tag(stage), epoch])
        order = rng.permutation(len(train_recs))
        train_loss = 0.0
        for k in order:
            rec = train_recs[k]
            ex_rng = np.random.default_rng(
                [cfg.seed, _stage_tag(stage), epoch, _stable_id(rec)]
            )
            inputs, target = make_example(store, stack, rec, ex_rng, cfg, grid)
            out = net.forward(*inputs, train=True)
            loss, grad = loss_fn(out, target)
            train_loss += loss
            net.zero_grads()
            net.backward(grad)
            opt.step(net.params(), net.grads())
        dev = dev_loss()
        history["epochs"].append({"epoch": epoch,
                                  "train_loss": train_loss / len(train_recs),
                                  "dev_loss": dev})
        history["dev_loss"].append(dev)
        if log:
            log(f"[{stage}] epoch {epoch}: train {train_loss / len(train_recs):.5f} "
                f"dev {dev:.5f}")
        if dev < best_loss - 1e-9:
            best_loss = dev
            best_params = net.copy_params()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.set_params(best_params)
    history["best_dev_loss"] = best_loss
    history["steps"] = opt.step_count
    return history


def _stage_tag(stage):
    return STAGES.index(stage) + 101


def _stable_id(rec):
    return int(rec["id"].rsplit("_", 1)[-1])


def checkpoint_path(out_dir, stage):
    return Path(out_dir) / f"{stage}.ckpt"


def _build_net(stage, cfg, stft_cfg):
    bins = stft_cfg.bin_count
    if stage.startswith("doa"):
        return DoaNet(DoaNetConfig(bins=bins, hidden=cfg.hidden,
                                   dropout_p=cfg.dropout_p,
                                   seed=cfg.seed + _stage_tag(stage)))
    return MaskNet(MaskNetConfig(bins=bins, hidden=cfg.hidden,
                                 seed=cfg.seed + _stage_tag(stage)))


def train_sequence(manifest_path, out_dir, cfg, stages=STAGES, geometry=None,
                   log=None, resume=False):
    """Train the requested stages in canonical order, saving one checkpoint
    per stage plus a history JSON. Earlier stages must already have
    checkpoints when training starts mid-sequence."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry = geometry or load_dataset_geometry(manifest_path)
    store = SceneStore(manifest_path, cfg.stft, geometry)
    stages = [s for s in STAGES if s in stages]
    if not stages:
        raise ConfigError("no valid stages requested")

    nets = {}
    for prior in STAGES[: STAGES.index(stages[0])]:
        path = checkpoint_path(out_dir, prior)
        if not path.exists():
            raise ConfigError(
                f"stage {stages[0]!r} needs the {prior!r} checkpoint at {path}; "
                "train earlier stages first"
            )
        nets[prior], _ = load_net(path)

    histories = []
    for stage in stages:
        idx = STAGES.index(stage)
        for prior in STAGES[:idx]:
            if prior not in nets:
                path = checkpoint_path(out_dir, prior)
                if not path.exists():
                    raise ConfigError(f"missing upstream checkpoint {path}")
                nets[prior], _ = load_net(path)
        net = _build_net(stage, cfg, cfg.stft)
        prior_steps = 0
        ckpt = checkpoint_path(out_dir, stage)
        if resume and ckpt.exists():
            net, header = load_net(ckpt)
            prior_steps = header.get("step", 0)
        stack = FrozenStack(store, doa1=nets.get("doa1"), mask1=nets.get("mask1"),
                            doa2=nets.get("doa2"))
        history = train_stage(stage, net, store, stack, cfg, log=log)
        history["steps"] += prior_steps
        save_net(ckpt, net, step=history["steps"])
        nets[stage] = net
        histories.append(history)

    with open(out_dir / "training_history.json", "w") as f:
        json.dump(histories, f, indent=2)
    return {s: str(checkpoint_path(out_dir, s)) for s in stages}


def load_dataset_geometry(manifest_path):
    """Array geometry recorded next to the manifest, or the default array."""
    cfg_path = Path(manifest_path).parent / "generator_config.json"
    if cfg_path.exists():
        with open(cfg_path) as f:
            data = json.load(f)
        spacings = data.get("mic_spacings_m")
        if spacings:
            return ArrayGeometry.linear(spacings)
    return ArrayGeometry.kinect_like()
