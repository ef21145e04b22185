"""Training loop: minibatched local updates, natural-gradient steps for the
variational Gaussians, Adam ascent on factors and inducing inputs."""

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import models
from .kernels import RbfKernel, chol_psd, gram
from .pg import make_sites
from .tensordata import SparseTensor, minibatches
from .vgauss import NaturalGaussian, from_prior, ng_step

MODELS = ("gptf-probit", "gptf-pg", "ented")

CHECKPOINT_MAGIC = "entd-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite objective or other numerical abort, with diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(ValueError):
    """Unreadable, truncated, or version-mismatched checkpoint."""


@dataclass
class TrainConfig:
    model: str = "ented"
    likelihood: str = "bernoulli"
    rank: int = 3
    inducing_u: int = 50
    inducing_v: int = 50
    batch_size: int = 128
    epochs: int = 200
    lr: float = 1e-3
    ng_rate: float = 0.3
    zeta: float = 20.0
    bandwidth: float = 1.0
    learn_bandwidth: bool = False
    early_stop: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        positive = {
            "rank": self.rank,
            "inducing_u": self.inducing_u,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "zeta": self.zeta,
            "bandwidth": self.bandwidth,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.epochs < 0 or self.inducing_v < 0:
            raise ValueError("epochs and inducing_v must be nonnegative")
        if not 0.0 < self.ng_rate <= 1.0:
            raise ValueError(f"ng_rate must be in (0, 1], got {self.ng_rate}")
        if self.model == "ented" and self.inducing_v < 1:
            raise ValueError("ented requires inducing_v >= 1")
        if self.model == "gptf-probit" and self.likelihood != models.BERNOULLI:
            raise ValueError("gptf-probit supports only the bernoulli likelihood")
        if self.likelihood not in (models.BERNOULLI, models.NEGBIN):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    def likelihood_obj(self):
        return models.Likelihood(self.likelihood, self.zeta)


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    seconds: float
    factor_norm: float
    inducing_norm: float


@dataclass
class TrainReport:
    config: TrainConfig
    records: list = field(default_factory=list)
    state: object = None
    factors: models.FactorSet = None


def _check_data(config: TrainConfig, tensor: SparseTensor):
    if tensor.kind != config.likelihood_obj().data_kind:
        raise ValueError(
            f"{tensor.kind} tensor does not match likelihood {config.likelihood!r}"
        )


def init_state(config: TrainConfig, tensor: SparseTensor):
    """Random factors, inducing inputs at perturbed data locations, priors.

    Factors are standard normal (matching their prior); inducing inputs are
    assembled factor rows at training indices sampled without replacement,
    jittered by N(0, 0.01); q(u) and q(v) start at their priors.
    Deterministic given config.seed.
    """
    _check_data(config, tensor)
    n = tensor.nnz
    if config.inducing_u > n:
        raise ValueError(f"inducing_u={config.inducing_u} exceeds N={n}")
    needs_ortho = config.model == "ented"
    if needs_ortho and config.inducing_v > n:
        raise ValueError(f"inducing_v={config.inducing_v} exceeds N={n}")
    rng = np.random.default_rng(config.seed)
    factors = models.FactorSet(
        [rng.standard_normal((s, config.rank)) for s in tensor.shape]
    )

    def draw_inducing(count):
        rows = rng.choice(n, size=count, replace=False)
        base = models.assemble_inputs(factors, tensor.indices[rows])
        noise = rng.normal(0.0, 0.1, size=base.shape)  # variance 0.01
        return (base + torch.as_tensor(noise)).detach()

    kernel = RbfKernel(config.bandwidth, learnable=config.learn_bandwidth)
    inducing = draw_inducing(config.inducing_u)
    fac_bb = chol_psd(gram(kernel, inducing, inducing))
    likelihood = config.likelihood_obj()

    if config.model == "gptf-probit":
        state = models.ProbitState(
            kernel=kernel,
            inducing=inducing,
            qu_mean=torch.zeros(config.inducing_u, dtype=torch.float64),
            qu_chol=fac_bb.chol.clone(),
            likelihood=likelihood,
        )
    elif config.model == "gptf-pg":
        state = models.SvgpState(
            kernel=kernel,
            inducing=inducing,
            qu=from_prior(fac_bb),
            likelihood=likelihood,
        )
    else:
        ortho = draw_inducing(config.inducing_v)
        fac_hh = chol_psd(gram(kernel, ortho, ortho))
        state = models.SolveState(
            kernel=kernel,
            inducing=inducing,
            qu=from_prior(fac_bb),
            likelihood=likelihood,
            inducing_ortho=ortho,
            qv=from_prior(fac_hh),
        )
    return factors, state


def _trainable_params(config, state, factors):
    params = list(factors.factors) + [state.inducing]
    if isinstance(state, models.SolveState):
        params.append(state.inducing_ortho)
    if isinstance(state, models.ProbitState):
        params += [state.qu_mean, state.qu_chol]
    for p in params:
        p.requires_grad_(True)
    if config.learn_bandwidth:
        params.append(state.kernel.log_bandwidth)
    return params


def _pg_step(config, state, factors, batch):
    """Local tilt update, NG step(s), then one Adam step on the ELBO.

    The batch geometry does not depend on the variational Gaussians, so it
    is built once inside the autograd graph and read (detached) by the
    closed-form updates; the ELBO then reuses the same graph.
    """
    kind = state.likelihood.data_kind
    inputs = models.assemble_inputs(factors, batch.indices)
    if isinstance(state, models.SolveState):
        geo = models.solve_geometry(state, inputs)
    else:
        geo = models.svgp_geometry(state, inputs)
    with torch.no_grad():
        if isinstance(state, models.SolveState):
            c = models.solve_local_update(state, geo)
        else:
            c = models.pg_local_update(state, geo)
        sites = make_sites(batch.values, kind, state.likelihood.zeta, c.numpy())
        if isinstance(state, models.SolveState):
            t1, t2 = models.solve_ng_target_u(state, geo, batch, sites)
            state.qu = ng_step(state.qu, t1, t2, config.ng_rate)
            if state.num_ortho:
                t1, t2 = models.solve_ng_target_v(state, geo, batch, sites)
                state.qv = ng_step(state.qv, t1, t2, config.ng_rate)
        else:
            t1, t2 = models.pg_ng_targets(state, geo, batch, sites)
            state.qu = ng_step(state.qu, t1, t2, config.ng_rate)
    if isinstance(state, models.SolveState):
        return models.solve_elbo(state, factors, batch, sites, geometry=geo), sites
    return models.pg_elbo(state, factors, batch, sites, geometry=geo), sites


def fit(config: TrainConfig, train: SparseTensor, log_stream=None) -> TrainReport:
    """Run the full training loop and return per-epoch records plus state.

    Per minibatch: assemble inputs and geometry, closed-form tilt update,
    NG step on q(u) (and q(v)), then one Adam step on factors and inducing
    inputs with the variational Gaussians frozen.  The probit variant has
    no local/NG stage; its q(u) moments train by gradient.
    """
    _check_data(config, train)
    factors, state = init_state(config, train)
    params = _trainable_params(config, state, factors)
    opt = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    report = TrainReport(config=config, state=state, factors=factors)

    for epoch in range(config.epochs):
        tic = time.perf_counter()
        elbo_sum, batches = 0.0, 0
        seed = np.random.SeedSequence((config.seed, epoch))
        for batch in minibatches(train, config.batch_size, seed):
            opt.zero_grad(set_to_none=True)
            if isinstance(state, models.ProbitState):
                elbo = models.probit_elbo(state, factors, batch)
            else:
                elbo, _ = _pg_step(config, state, factors, batch)
            value = float(elbo.detach())
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite ELBO at epoch {epoch}",
                    diagnostics={
                        "epoch": epoch,
                        "batch": batches,
                        "elbo": value,
                        "factor_norm": float(
                            sum((z * z).sum() for z in factors.factors).sqrt().detach()
                        ),
                    },
                )
            (-elbo).backward()
            opt.step()
            elbo_sum += value
            batches += 1
        with torch.no_grad():
            record = EpochRecord(
                epoch=epoch,
                elbo=elbo_sum / max(batches, 1),
                seconds=time.perf_counter() - tic,
                factor_norm=float(sum((z * z).sum() for z in factors.factors).sqrt()),
                inducing_norm=float((state.inducing**2).sum().sqrt()),
            )
        report.records.append(record)
        if log_stream is not None:
            log_stream.write(
                json.dumps(
                    {"epoch": record.epoch, "elbo": record.elbo, "seconds": record.seconds}
                )
                + "\n"
            )
            log_stream.flush()
        if config.early_stop and len(report.records) > 10:
            prev = report.records[-11].elbo
            if abs(record.elbo - prev) < 1e-6 * max(1.0, abs(prev)):
                break
    for p in params:
        p.requires_grad_(False)
    return report


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw little-endian float64 payloads
# ---------------------------------------------------------------------------

def _state_arrays(state, factors):
    arrays = [(f"factor_{d}", z) for d, z in enumerate(factors.factors)]
    arrays.append(("inducing", state.inducing))
    arrays.append(("log_bandwidth", state.kernel.log_bandwidth.reshape(1)))
    if isinstance(state, models.ProbitState):
        arrays += [("qu_mean", state.qu_mean), ("qu_chol", state.qu_chol)]
    else:
        arrays += [("qu_eta1", state.qu.eta1), ("qu_eta2", state.qu.eta2)]
    if isinstance(state, models.SolveState):
        arrays += [
            ("inducing_ortho", state.inducing_ortho),
            ("qv_eta1", state.qv.eta1),
            ("qv_eta2", state.qv.eta2),
        ]
    return [(name, t.detach().numpy().astype("<f8")) for name, t in arrays]


def save_checkpoint(state, factors, config: TrainConfig, path):
    """Byte-deterministic checkpoint: length-prefixed manifest, then payloads."""
    arrays = _state_arrays(state, factors)
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "model": config.model,
        "config": asdict(config),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path):
    """Rebuild (state, factors, manifest) from :func:`save_checkpoint` output."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError("file too short for a manifest header")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + header_len:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not an entd checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}"
        )
    offset = 8 + header_len
    arrays = {}
    for spec in manifest["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"truncated payload for array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(
            raw[offset : offset + nbytes], dtype="<f8"
        ).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError("trailing bytes after final payload")

    config = TrainConfig(**manifest["config"])
    factors = models.FactorSet(
        [arrays[f"factor_{d}"].copy() for d in range(len(config_shape(manifest)))]
    )
    kernel = RbfKernel(
        float(np.exp(arrays["log_bandwidth"][0])), learnable=config.learn_bandwidth
    )
    t = lambda name: torch.as_tensor(arrays[name].copy())
    likelihood = config.likelihood_obj()
    if config.model == "gptf-probit":
        state = models.ProbitState(
            kernel, t("inducing"), t("qu_mean"), t("qu_chol"), likelihood
        )
    elif config.model == "gptf-pg":
        state = models.SvgpState(
            kernel, t("inducing"), NaturalGaussian(t("qu_eta1"), t("qu_eta2")), likelihood
        )
    else:
        state = models.SolveState(
            kernel,
            t("inducing"),
            NaturalGaussian(t("qu_eta1"), t("qu_eta2")),
            likelihood,
            inducing_ortho=t("inducing_ortho"),
            qv=NaturalGaussian(t("qv_eta1"), t("qv_eta2")),
        )
    return state, factors, manifest


def config_shape(manifest):
    """Factor row counts recorded in a checkpoint manifest."""
    return [
        spec["shape"][0]
        for spec in manifest["arrays"]
        if spec["name"].startswith("factor_")
    ]
