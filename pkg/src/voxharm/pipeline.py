"""Training and inference orchestration for both harmonization stages.

Stage I trains the gradient-conditioned denoiser jointly over all sites and
sequences while maintaining gated per-sequence EMA style records; Stage II
fine-tunes a copy of that denoiser (plus the tri-planar style aggregator)
toward one target site using deterministic invert/sample trajectories.  All
entry points are reproducible bit-for-bit given (seed, config, manifest).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as container
from .config import RunConfig, TrajectorySection
from .denoiser import DenoiserConfig, DenoiserNet
from .diffusion import (
    DiffusionSchedule,
    StageOneWeights,
    build_schedule,
    ddim_invert,
    ddim_sample,
    forward_diffuse,
    noise_loss,
    one_step_estimate,
    stage1_loss,
)
from .gradients import gradient_map
from .stylestats import EmaStyleRecord, histogram_wd
from .tpa import (
    StageTwoWeights,
    TriPlanarConfig,
    TriPlanarEncoder,
    make_encoder,
    stage2_loss,
    style_vector,
)
from .volume import DatasetManifest, Volume, VolumeRecord

CHECKPOINT_VERSION = "1"


class PipelineError(Exception):
    pass


class EmptySequenceError(PipelineError):
    pass


class TrainingDivergedError(PipelineError):
    pass


class FingerprintMismatchError(PipelineError):
    pass


def _derive_seed(root: int, *salt: int) -> int:
    return int(
        np.random.SeedSequence((root,) + salt).generate_state(1, dtype=np.uint64)[0] % (2**63)
    )


def _volume_tensor(volume: Volume) -> torch.Tensor:
    return torch.from_numpy(volume.data).to(torch.float32)[None, None]


def _state_to_blobs(state: dict[str, torch.Tensor], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().numpy().astype(np.float32) for k, v in state.items()}


def _blobs_to_state(
    blobs: dict[str, np.ndarray], prefix: str, reference: dict[str, torch.Tensor]
) -> dict[str, torch.Tensor]:
    state = {}
    for key, ref in reference.items():
        name = f"{prefix}{key}"
        if name not in blobs:
            raise container.CheckpointError(f"checkpoint missing parameter blob {name!r}")
        arr = blobs[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise container.CheckpointError(
                f"parameter {name!r} has shape {tuple(arr.shape)}, expected {tuple(ref.shape)}"
            )
        state[key] = torch.from_numpy(arr.copy())
    return state


def _stage1_fingerprint(meta: dict) -> str:
    keys = ("denoiser", "schedule", "grad_delta", "grad_q", "record_config", "sequences")
    payload = json.dumps({k: meta[k] for k in keys}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class StageOneCheckpoint:
    """Frozen global harmonizer: denoiser weights + EMA records + schedule."""

    denoiser_config: DenoiserConfig
    state: dict[str, torch.Tensor]
    record: EmaStyleRecord
    schedule_config: tuple[int, float, float]
    grad_delta: float
    grad_q: float
    seed: int
    version: str = CHECKPOINT_VERSION
    _model: DenoiserNet | None = field(default=None, repr=False)
    _schedule: DiffusionSchedule | None = field(default=None, repr=False)

    def meta(self) -> dict:
        return {
            "kind": "stage1",
            "version": self.version,
            "seed": self.seed,
            "denoiser": {
                "channels": list(self.denoiser_config.channels),
                "res_blocks": self.denoiser_config.res_blocks,
                "emb_width": self.denoiser_config.emb_width,
                "n_sequences": self.denoiser_config.n_sequences,
                "timesteps": self.denoiser_config.timesteps,
                "use_gradient_condition": self.denoiser_config.use_gradient_condition,
                "use_ema_modulation": self.denoiser_config.use_ema_modulation,
            },
            "schedule": list(self.schedule_config),
            "grad_delta": self.grad_delta,
            "grad_q": self.grad_q,
            "record_config": {
                "gamma": self.record.gamma,
                "tau": self.record.tau,
                "k": self.record.k,
                "v_min": self.record.v_min,
                "v_max": self.record.v_max,
                "bandwidth": self.record.bandwidth,
            },
            "sequences": list(self.record.sequences),
            "record_state": self.record.state_dict(),
        }

    @property
    def fingerprint(self) -> str:
        return _stage1_fingerprint(self.meta())

    def model(self) -> DenoiserNet:
        if self._model is None:
            net = DenoiserNet(self.denoiser_config)
            net.load_state_dict(self.state)
            net.eval()
            self._model = net
        return self._model

    def schedule(self) -> DiffusionSchedule:
        if self._schedule is None:
            self._schedule = build_schedule(*self.schedule_config)
        return self._schedule

    def save(self, path: str | Path) -> None:
        container.save_container(path, self.meta(), _state_to_blobs(self.state, "denoiser."))

    @classmethod
    def load(cls, path: str | Path) -> "StageOneCheckpoint":
        meta, blobs = container.load_container(path)
        if meta.get("kind") != "stage1":
            raise container.CheckpointError(f"{path}: not a stage-1 checkpoint")
        dn = meta["denoiser"]
        config = DenoiserConfig(
            channels=tuple(dn["channels"]),
            res_blocks=dn["res_blocks"],
            emb_width=dn["emb_width"],
            n_sequences=dn["n_sequences"],
            timesteps=dn["timesteps"],
            use_gradient_condition=dn["use_gradient_condition"],
            use_ema_modulation=dn["use_ema_modulation"],
        )
        reference = DenoiserNet(config).state_dict()
        state = _blobs_to_state(blobs, "denoiser.", reference)
        record = EmaStyleRecord.from_state_dict(meta["record_state"])
        return cls(
            denoiser_config=config,
            state=state,
            record=record,
            schedule_config=tuple(meta["schedule"]),
            grad_delta=meta["grad_delta"],
            grad_q=meta["grad_q"],
            seed=meta["seed"],
            version=meta["version"],
        )


@dataclass
class StageTwoCheckpoint:
    """Target-adapted denoiser copy plus trained style aggregator."""

    denoiser_config: DenoiserConfig
    state: dict[str, torch.Tensor]
    tpa_config: TriPlanarConfig
    tpa_state: dict[str, torch.Tensor]
    encoder_name: str
    encoder_seed: int
    target_site: int
    parent_fingerprint: str
    seed: int
    version: str = CHECKPOINT_VERSION
    _model: DenoiserNet | None = field(default=None, repr=False)

    def meta(self) -> dict:
        return {
            "kind": "stage2",
            "version": self.version,
            "seed": self.seed,
            "target_site": self.target_site,
            "parent_fingerprint": self.parent_fingerprint,
            "denoiser": {
                "channels": list(self.denoiser_config.channels),
                "res_blocks": self.denoiser_config.res_blocks,
                "emb_width": self.denoiser_config.emb_width,
                "n_sequences": self.denoiser_config.n_sequences,
                "timesteps": self.denoiser_config.timesteps,
                "use_gradient_condition": self.denoiser_config.use_gradient_condition,
                "use_ema_modulation": self.denoiser_config.use_ema_modulation,
            },
            "tpa": {
                "embed_dim": self.tpa_config.embed_dim,
                "slices_per_view": self.tpa_config.slices_per_view,
                "margin": self.tpa_config.margin,
                "heads": self.tpa_config.heads,
                "slice_size": self.tpa_config.slice_size,
                "use_positional": self.tpa_config.use_positional,
                "fusion_hidden": self.tpa_config.fusion_hidden,
                "alpha_init": self.tpa_config.alpha_init,
                "seed": self.tpa_config.seed,
            },
            "encoder": {"name": self.encoder_name, "seed": self.encoder_seed},
        }

    def model(self) -> DenoiserNet:
        if self._model is None:
            net = DenoiserNet(self.denoiser_config)
            net.load_state_dict(self.state)
            net.eval()
            self._model = net
        return self._model

    def save(self, path: str | Path) -> None:
        blobs = _state_to_blobs(self.state, "denoiser.")
        blobs.update(_state_to_blobs(self.tpa_state, "tpa."))
        container.save_container(path, self.meta(), blobs)

    @classmethod
    def load(cls, path: str | Path) -> "StageTwoCheckpoint":
        meta, blobs = container.load_container(path)
        if meta.get("kind") != "stage2":
            raise container.CheckpointError(f"{path}: not a stage-2 checkpoint")
        dn = meta["denoiser"]
        config = DenoiserConfig(
            channels=tuple(dn["channels"]),
            res_blocks=dn["res_blocks"],
            emb_width=dn["emb_width"],
            n_sequences=dn["n_sequences"],
            timesteps=dn["timesteps"],
            use_gradient_condition=dn["use_gradient_condition"],
            use_ema_modulation=dn["use_ema_modulation"],
        )
        tpa_config = TriPlanarConfig(**meta["tpa"])
        reference = DenoiserNet(config).state_dict()
        state = _blobs_to_state(blobs, "denoiser.", reference)
        encoder = make_encoder(
            meta["encoder"]["name"],
            width=tpa_config.embed_dim,
            input_size=tpa_config.slice_size,
            seed=meta["encoder"]["seed"],
        )
        tpa_ref = TriPlanarEncoder(tpa_config, encoder).state_dict()
        tpa_state = _blobs_to_state(blobs, "tpa.", tpa_ref)
        return cls(
            denoiser_config=config,
            state=state,
            tpa_config=tpa_config,
            tpa_state=tpa_state,
            encoder_name=meta["encoder"]["name"],
            encoder_seed=meta["encoder"]["seed"],
            target_site=meta["target_site"],
            parent_fingerprint=meta["parent_fingerprint"],
            seed=meta["seed"],
            version=meta["version"],
        )

    def aggregator(self) -> TriPlanarEncoder:
        encoder = make_encoder(
            self.encoder_name,
            width=self.tpa_config.embed_dim,
            input_size=self.tpa_config.slice_size,
            seed=self.encoder_seed,
        )
        module = TriPlanarEncoder(self.tpa_config, encoder)
        module.load_state_dict(self.tpa_state)
        module.eval()
        return module


class _JsonlLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _load_split(manifest: DatasetManifest, split: str) -> list[VolumeRecord]:
    return [manifest.load(e) for e in manifest.filter(split=split)]


def train_stage1(
    manifest: DatasetManifest, config: RunConfig, log_path: str | Path | None = None
) -> StageOneCheckpoint:
    """Train the global harmonizer on the manifest's train split."""
    sequences = tuple(manifest.sequences)
    train_entries = manifest.filter(split="train")
    for m in sequences:
        if not [e for e in train_entries if e.sequence == m]:
            raise EmptySequenceError(f"train split has no volumes for sequence {m}")

    seed = _derive_seed(config.seeds.root, 1)
    torch.manual_seed(seed)
    s1 = config.stage1
    denoiser_config = DenoiserConfig(
        channels=tuple(config.denoiser.channels),
        res_blocks=config.denoiser.res_blocks,
        emb_width=config.denoiser.emb_width,
        n_sequences=max(sequences),
        timesteps=config.schedule.timesteps,
        use_gradient_condition=config.denoiser.use_gradient_condition,
        use_ema_modulation=config.denoiser.use_ema_modulation,
    )
    model = DenoiserNet(denoiser_config)
    schedule = build_schedule(
        config.schedule.timesteps, config.schedule.beta_start, config.schedule.beta_end
    )
    record = EmaStyleRecord(
        sequences=sequences,
        gamma=s1.gamma,
        tau=s1.tau,
        k=s1.hist_bins,
        v_min=s1.hist_min,
        v_max=s1.hist_max,
    )
    weights = StageOneWeights(noise=s1.w_noise, gradient=s1.w_gradient, ema=s1.w_ema)

    train = [manifest.load(e) for e in train_entries]
    val = _load_split(manifest, "val")
    denoiser_config.validate_dims(train[0].volume.dims)
    xs = [_volume_tensor(r.volume) for r in train]
    gs = [
        gradient_map(x[0, 0], delta=s1.grad_delta, q=s1.grad_q)[None, None].to(torch.float32)
        for x in xs
    ]
    ms = [r.sequence for r in train]

    optimizer = torch.optim.Adam(model.parameters(), lr=s1.lr)
    sample_gen = torch.Generator().manual_seed(_derive_seed(config.seeds.root, 2))
    logger = _JsonlLogger(log_path)

    for epoch in range(s1.epochs):
        order = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((config.seeds.root, 3, epoch)))
        ).permutation(len(train))
        epoch_parts = {"noise": 0.0, "gradient": 0.0, "ema": 0.0}
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), s1.batch_size):
            idx = order[start : start + s1.batch_size]
            x = torch.cat([xs[i] for i in idx])
            g = torch.cat([gs[i] for i in idx])
            m_list = [ms[i] for i in idx]
            m = torch.tensor(m_list, dtype=torch.long)
            style = torch.tensor([record.view(mm) for mm in m_list], dtype=torch.float32)
            t = torch.randint(1, schedule.timesteps + 1, (len(idx),), generator=sample_gen)
            eps = torch.randn(x.shape, generator=sample_gen)

            def denoise(noisy, t_in):
                return model(noisy, t_in, g, m, style)

            total, parts = stage1_loss(
                x, g, m_list, t, eps, denoise, record, schedule, weights
            )
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite stage-1 loss at epoch {epoch}, parts={parts}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_loss += float(total.detach())
            for k in epoch_parts:
                epoch_parts[k] += parts[k]
            n_batches += 1

        entry = {
            "stage": 1,
            "epoch": epoch,
            "loss": epoch_loss / n_batches,
            **{k: v / n_batches for k, v in epoch_parts.items()},
        }
        if val:
            entry["val_noise"] = _validation_noise_loss(
                model, record, schedule, val, s1, config.seeds.root
            )
        logger.log(entry)

    return StageOneCheckpoint(
        denoiser_config=denoiser_config,
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        record=record,
        schedule_config=(
            config.schedule.timesteps,
            config.schedule.beta_start,
            config.schedule.beta_end,
        ),
        grad_delta=s1.grad_delta,
        grad_q=s1.grad_q,
        seed=config.seeds.root,
    )


def _validation_noise_loss(model, record, schedule, val, s1, root_seed) -> float:
    """Mean noise-prediction MSE on the val split with per-item frozen noise."""
    losses = []
    with torch.no_grad():
        for i, rec in enumerate(val):
            gen = torch.Generator().manual_seed(_derive_seed(root_seed, 4, i))
            x = _volume_tensor(rec.volume)
            g = gradient_map(x[0, 0], delta=s1.grad_delta, q=s1.grad_q)[None, None].to(
                torch.float32
            )
            m = torch.tensor([rec.sequence], dtype=torch.long)
            style = torch.tensor([record.view(rec.sequence)], dtype=torch.float32)
            t = torch.randint(1, schedule.timesteps + 1, (1,), generator=gen)
            eps = torch.randn(x.shape, generator=gen)
            noisy = forward_diffuse(x, t, eps, schedule)
            losses.append(float(noise_loss(eps, model(noisy, t, g, m, style))))
    return float(np.mean(losses))


def _denoise_closure(model, grad: torch.Tensor, sequence: int, style_view: tuple[float, float]):
    m = torch.tensor([sequence], dtype=torch.long)
    style = torch.tensor([style_view], dtype=torch.float32)

    def denoise(noisy, t):
        return model(noisy, t, grad, m, style)

    return denoise


def harmonize_global(
    record: VolumeRecord, ckpt: StageOneCheckpoint, traj: TrajectorySection
) -> Volume:
    """Map one volume into its sequence's unified domain (invert then sample)."""
    model = ckpt.model()
    schedule = ckpt.schedule()
    x = _volume_tensor(record.volume)
    g = gradient_map(x[0, 0], delta=ckpt.grad_delta, q=ckpt.grad_q)[None, None].to(torch.float32)
    denoise = _denoise_closure(model, g, record.sequence, ckpt.record.view(record.sequence))
    with torch.no_grad():
        latent = ddim_invert(x, denoise, schedule, traj.t_forward)
        out = ddim_sample(latent, denoise, schedule, traj.t_reverse)
    return Volume(out[0, 0].numpy())


def select_target_site(manifest: DatasetManifest, bins: int = 100) -> int:
    """Site with the lowest mean pairwise intra-site intensity-histogram WD.

    Scores average over sequences; ties break toward the smaller site id.
    """
    scores = {}
    for site in manifest.sites:
        per_sequence = []
        for m in manifest.sequences:
            entries = manifest.filter(site=site, sequence=m)
            if len(entries) < 2:
                raise PipelineError(
                    f"site {site} has {len(entries)} volume(s) for sequence {m}; need >= 2"
                )
            hists = []
            for e in entries:
                data = manifest.load(e).volume.data
                counts, _ = np.histogram(data.ravel(), bins=bins, range=(-1.0, 1.0))
                hists.append(counts / counts.sum())
            pair_wds = [
                histogram_wd(hists[i], hists[j])
                for i in range(len(hists))
                for j in range(i + 1, len(hists))
            ]
            per_sequence.append(float(np.mean(pair_wds)))
        scores[site] = float(np.mean(per_sequence))
    return min(sorted(scores), key=lambda s: scores[s])


def _iprime_cache_key(fingerprint: str, volume: Volume, traj: TrajectorySection) -> str:
    digest = hashlib.sha256()
    digest.update(fingerprint.encode())
    digest.update(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    digest.update(f"{traj.t_forward}:{traj.t_reverse}".encode())
    return digest.hexdigest()[:24]


def _globally_align(
    rec: VolumeRecord,
    s1: StageOneCheckpoint,
    traj: TrajectorySection,
    cache_dir: Path | None,
) -> Volume:
    """harmonize_global with an on-disk cache keyed by (ckpt, volume, trajectory)."""
    from .volume import read_volume, write_volume

    if cache_dir is None:
        return harmonize_global(rec, s1, traj)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _iprime_cache_key(s1.fingerprint, rec.volume, traj)
    path = cache_dir / f"iprime_{key}.mmhv"
    if path.exists():
        return read_volume(path)
    out = harmonize_global(rec, s1, traj)
    write_volume(out, path)
    return out


def finetune_stage2(
    manifest: DatasetManifest,
    target_site: int,
    s1: StageOneCheckpoint,
    config: RunConfig,
    log_path: str | Path | None = None,
    cache_dir: str | Path | None = None,
) -> StageTwoCheckpoint:
    """Fine-tune a copy of the Stage-I denoiser toward the target site's style.

    Sources pair with same-sequence target volumes round-robin; trajectories
    run through the trainable copy with gradients on the trailing sampling
    steps only; the style aggregator trains jointly.
    """
    if target_site not in manifest.sites:
        raise PipelineError(f"target site {target_site} not present in manifest")
    seed = _derive_seed(config.seeds.root, 11)
    torch.manual_seed(seed)
    s2 = config.stage2
    traj = config.trajectory
    cache = Path(cache_dir) if cache_dir else None

    model = DenoiserNet(s1.denoiser_config)
    model.load_state_dict(copy.deepcopy(s1.state))
    model.train()
    encoder = make_encoder(
        config.tpa.encoder,
        width=config.tpa.embed_dim,
        input_size=config.tpa.slice_size,
        seed=config.tpa.encoder_seed,
    )
    tpa_config = TriPlanarConfig(
        embed_dim=config.tpa.embed_dim,
        slices_per_view=config.tpa.slices_per_view,
        margin=config.tpa.margin,
        heads=config.tpa.heads,
        slice_size=config.tpa.slice_size,
        use_positional=config.tpa.use_positional,
        fusion_hidden=config.tpa.fusion_hidden,
        alpha_init=config.tpa.alpha_init,
        seed=_derive_seed(config.seeds.root, 12) % (2**31),
    )
    aggregator = TriPlanarEncoder(tpa_config, encoder)
    schedule = s1.schedule()
    weights = StageTwoWeights(
        style=s2.w_style, consistency=s2.w_consistency, gradient=s2.w_gradient
    )

    train_records = [manifest.load(e) for e in manifest.filter(split="train")]
    sources = [r for r in train_records if r.site != target_site]
    targets = [r for r in train_records if r.site == target_site]
    if not targets:
        raise PipelineError(f"no train volumes at target site {target_site}")
    targets_by_seq = {m: [r for r in targets if r.sequence == m] for m in manifest.sequences}
    for m, pool in targets_by_seq.items():
        if sources and not pool:
            raise PipelineError(f"target site {target_site} has no sequence-{m} train volumes")

    # Globally aligned versions (frozen Stage-I model) of every train volume.
    aligned: dict[int, torch.Tensor] = {}
    aligned_grad: dict[int, torch.Tensor] = {}
    raw: dict[int, torch.Tensor] = {}
    for i, rec in enumerate(train_records):
        aligned_vol = _globally_align(rec, s1, traj, cache)
        aligned[i] = _volume_tensor(aligned_vol)
        aligned_grad[i] = gradient_map(aligned[i][0, 0], delta=s1.grad_delta, q=s1.grad_q)[
            None, None
        ].to(torch.float32)
        raw[i] = _volume_tensor(rec.volume)
    index_of = {id(rec): i for i, rec in enumerate(train_records)}

    optimizer = torch.optim.Adam(
        list(model.parameters()) + list(aggregator.parameters()), lr=s2.lr
    )
    logger = _JsonlLogger(log_path)

    def run_trajectory(x: torch.Tensor, g: torch.Tensor, sequence: int) -> torch.Tensor:
        denoise = _denoise_closure(model, g, sequence, s1.record.view(sequence))
        with torch.no_grad():
            latent = ddim_invert(x, denoise, schedule, traj.t_forward)
        return ddim_sample(latent, denoise, schedule, traj.t_reverse, grad_steps=s2.backprop_steps)

    for epoch in range(s2.epochs):
        order = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((config.seeds.root, 13, epoch)))
        ).permutation(len(sources))
        rr = {m: 0 for m in targets_by_seq}
        epoch_loss = 0.0
        epoch_parts = {"style": 0.0, "consistency": 0.0, "gradient": 0.0}
        optimizer.zero_grad()
        pending = 0
        for n, src_pos in enumerate(order):
            src = sources[src_pos]
            pool = targets_by_seq[src.sequence]
            tgt = pool[rr[src.sequence] % len(pool)]
            rr[src.sequence] += 1
            i_src = index_of[id(src)]
            i_tgt = index_of[id(tgt)]

            generated = run_trajectory(aligned[i_src], aligned_grad[i_src], src.sequence)
            self_generated = run_trajectory(aligned[i_tgt], aligned_grad[i_tgt], tgt.sequence)

            psi_target_raw = aggregator(raw[i_tgt][0, 0])
            psi_target_aligned = aggregator(aligned[i_tgt][0, 0])
            s_target = style_vector(psi_target_raw, psi_target_aligned)
            s_generated = style_vector(aggregator(generated[0, 0]), aggregator(aligned[i_src][0, 0]))
            s_self = style_vector(aggregator(self_generated[0, 0]), psi_target_aligned)

            total, parts = stage2_loss(
                s_target, s_generated, s_self, aligned_grad[i_src][0, 0], generated[0, 0], weights
            )
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite stage-2 loss at epoch {epoch}, parts={parts}"
                )
            (total / s2.accumulate).backward()
            pending += 1
            if pending == s2.accumulate or n == len(order) - 1:
                optimizer.step()
                optimizer.zero_grad()
                pending = 0
            epoch_loss += float(total.detach())
            for k in epoch_parts:
                epoch_parts[k] += parts[k]
        denom = max(len(order), 1)
        logger.log(
            {
                "stage": 2,
                "epoch": epoch,
                "loss": epoch_loss / denom,
                **{k: v / denom for k, v in epoch_parts.items()},
            }
        )

    return StageTwoCheckpoint(
        denoiser_config=s1.denoiser_config,
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        tpa_config=tpa_config,
        tpa_state={k: v.detach().clone() for k, v in aggregator.state_dict().items()},
        encoder_name=config.tpa.encoder,
        encoder_seed=config.tpa.encoder_seed,
        target_site=target_site,
        parent_fingerprint=s1.fingerprint,
        seed=config.seeds.root,
    )


def harmonize_to_target(
    record: VolumeRecord,
    s1: StageOneCheckpoint,
    s2: StageTwoCheckpoint,
    traj: TrajectorySection,
) -> Volume:
    """Globally align, then push through the fine-tuned target trajectory."""
    if s2.parent_fingerprint != s1.fingerprint:
        raise FingerprintMismatchError(
            f"stage-2 checkpoint was fine-tuned from {s2.parent_fingerprint}, "
            f"but this stage-1 checkpoint is {s1.fingerprint}"
        )
    aligned = harmonize_global(record, s1, traj)
    model = s2.model()
    schedule = s1.schedule()
    x = _volume_tensor(aligned)
    g = gradient_map(x[0, 0], delta=s1.grad_delta, q=s1.grad_q)[None, None].to(torch.float32)
    denoise = _denoise_closure(model, g, record.sequence, s1.record.view(record.sequence))
    with torch.no_grad():
        latent = ddim_invert(x, denoise, schedule, traj.t_forward)
        out = ddim_sample(latent, denoise, schedule, traj.t_reverse)
    return Volume(out[0, 0].numpy())
