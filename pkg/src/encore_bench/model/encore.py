"""ENCORE: step-wise hierarchical fusion encoder, CVAE, masked decoder, auxiliary branches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import nn
from ..autodiff import tensor as T
from ..autodiff.checkpoint import load_checkpoint, save_checkpoint
from ..autodiff.tensor import Tensor
from ..errors import BadCheckpoint, DisabledBranch, MissingFuture, TooFewModalities
from .bundle import Batch
from .config import MODALITY_DIMS, ModelConfig

# extra location-embedding inputs: absolute first box (normalized)
_LOCATION_EXTRA = 4


def gaussian_kld(mu_q, logvar_q, mu_p, logvar_p) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    var_ratio = T.exp(T.sub(logvar_q, logvar_p))
    diff = T.sub(mu_q, mu_p)
    mahal = T.div(T.mul(diff, diff), T.exp(logvar_p))
    terms = T.sub(T.add(T.sub(logvar_p, logvar_q), T.add(var_ratio, mahal)), 1.0)
    return T.mul(T.sum(terms, axis=-1), 0.5)


class StepwiseFusion(nn.Module):
    """Chain m modality embeddings through m-1 cross-attention units.

    Unit j takes the running fusion as query and modality j+1 as context;
    the unit outputs are concatenated and projected to the model width.
    """

    def __init__(self, m: int, embed_dim: int, model_dim: int, heads: int, rng):
        if m < 2:
            raise TooFewModalities(f"need at least 2 modalities, got {m}")
        self.units = [nn.CrossAttentionUnit(embed_dim, heads, rng) for _ in range(m - 1)]
        self.proj = nn.Linear((m - 1) * embed_dim, model_dim, rng)

    def __call__(self, embeds: list[Tensor]) -> Tensor:
        if len(embeds) != len(self.units) + 1:
            raise TooFewModalities(f"expected {len(self.units) + 1} modalities, got {len(embeds)}")
        running = embeds[0]
        outs = []
        for unit, e in zip(self.units, embeds[1:]):
            running = unit(running, e)
            outs.append(running)
        return self.proj(T.concat(outs, axis=-1))


class PairwiseFusion(nn.Module):
    """Cross-modal baseline: one unit per ordered modality pair, m(m-1) in total."""

    def __init__(self, m: int, embed_dim: int, model_dim: int, heads: int, rng):
        if m < 2:
            raise TooFewModalities(f"need at least 2 modalities, got {m}")
        self.pairs = [(i, j) for i in range(m) for j in range(m) if i != j]
        self.units = [nn.CrossAttentionUnit(embed_dim, heads, rng) for _ in self.pairs]
        self.proj = nn.Linear(len(self.pairs) * embed_dim, model_dim, rng)

    def __call__(self, embeds: list[Tensor]) -> Tensor:
        outs = [unit(embeds[i], embeds[j]) for unit, (i, j) in zip(self.units, self.pairs)]
        return self.proj(T.concat(outs, axis=-1))


class Encoder(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, ff_mult: int, rng):
        self.blocks = [nn.EncoderBlock(dim, heads, rng, ff_mult) for _ in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        t, d = x.shape[1], x.shape[2]
        x = T.add(x, nn.sinusoidal_positions(t, d))
        for block in self.blocks:
            x = block(x)
        return x


class GaussianHead(nn.Module):
    def __init__(self, d_in: int, hidden: tuple[int, ...], latent: int, rng):
        self.mlp = nn.MLP([d_in, *hidden], rng)
        self.out = nn.Linear(hidden[-1], 2 * latent, rng)
        self.latent = latent

    def __call__(self, x: Tensor, clamp: float) -> tuple[Tensor, Tensor]:
        h = self.out(T.relu(self.mlp(x)))
        mu = T.slice(h, 0, self.latent)
        logvar = T.clip(T.slice(h, self.latent, 2 * self.latent), -clamp, clamp)
        return mu, logvar


@dataclass
class Outputs:
    trajectory: Tensor  # (k, b, tau, 4)
    scaled: Tensor | None  # (k, b, tau, 4)
    aux: Tensor | None  # reconstruction (b, o, 4) or poft (b, tau, 4)
    kld: Tensor | None  # (b,)
    extras: dict = field(default_factory=dict)


class Encore(nn.Module):
    def __init__(self, config: ModelConfig):
        cfg = self.config = config
        rng = np.random.default_rng(cfg.seed)
        E, D, L = cfg.embed_dim, cfg.model_dim, cfg.latent_dim
        m = len(cfg.modality_order)

        self.embed = [
            nn.Linear(MODALITY_DIMS[name] + (_LOCATION_EXTRA if name == "location" else 0), E, rng)
            for name in cfg.modality_order
        ]
        fusion_cls = StepwiseFusion if cfg.use_hsf else PairwiseFusion
        self.fusion = fusion_cls(m, E, D, cfg.heads, rng)
        self.encoder = Encoder(D, cfg.heads, cfg.enc_layers, cfg.ff_mult, rng)

        self.future_embed = nn.Linear(4, E, rng)
        self.prior = GaussianHead(D, cfg.cvae_hidden, L, rng)
        self.posterior = GaussianHead(D + E, cfg.cvae_hidden, L, rng)

        self.latent_fuse = nn.Linear(D + L, D, rng)
        self.future_ego_embed = nn.Linear(MODALITY_DIMS["ego"], D, rng)
        self.decoder = [nn.DecoderBlock(D, cfg.heads, rng, cfg.ff_mult) for _ in range(cfg.dec_layers)]
        self.traj_head = nn.MLP([D, D, 4], rng)
        self.scaled_head = nn.MLP([D, D, 4], rng) if cfg.use_sft else None

        if cfg.use_rot or cfg.use_poft:
            self.aux_state = nn.Linear(2, E, rng)
            self.aux_context = nn.Linear(MODALITY_DIMS["ego"] + 4, E, rng)
            self.aux_cross = nn.CrossAttentionUnit(E, cfg.heads, rng)
            self.aux_proj = nn.Linear(E, D, rng)
            if cfg.use_rot:
                self.rot_decoder = nn.EncoderBlock(D, cfg.heads, rng, cfg.ff_mult)
            else:
                self.poft_query = nn.Linear(D, D, rng)
                self.poft_decoder = nn.DecoderBlock(D, cfg.heads, rng, cfg.ff_mult)
            self.aux_head = nn.MLP([D, D, 4], rng)

    # ------------------------------------------------------------------
    # stages
    # ------------------------------------------------------------------

    def embed_modalities(self, batch: Batch) -> list[Tensor]:
        out = []
        for layer, name in zip(self.embed, self.config.modality_order):
            x = batch.modality(name)
            if name == "location":
                first = np.broadcast_to(batch.first_box[:, None, :], x.shape)
                x = np.concatenate([x, first], axis=-1)
            out.append(layer(x))
        return out

    def stepwise_hierarchical_fuse(self, embeds: list[Tensor]) -> Tensor:
        return self.fusion(embeds)

    def encode(self, fused: Tensor) -> Tensor:
        return self.encoder(fused)

    def cvae(self, enc: Tensor, future: np.ndarray | None = None, k: int = 1,
             rng: np.random.Generator | None = None, mode: str = "sample"):
        """Latent samples ``(k*b, L)`` and per-sample KL divergence.

        ``mode``: ``"sample"`` draws from the posterior when ``future`` is
        given (training) or the prior otherwise; ``"posterior_mean"`` uses the
        posterior mean (needs ``future``); ``"prior_mean"`` uses the prior mean.
        """
        clamp = self.config.logvar_clamp
        pooled = T.mean(enc, axis=1)
        mu_p, logvar_p = self.prior(pooled, clamp)
        b, L = mu_p.shape
        kld = None
        q = None
        if future is not None:
            fut = T.mean(self.future_embed(future), axis=1)
            mu_q, logvar_q = self.posterior(T.concat([pooled, fut], axis=-1), clamp)
            kld = gaussian_kld(mu_q, logvar_q, mu_p, logvar_p)
            q = (mu_q, logvar_q)
        elif mode == "posterior_mean":
            raise MissingFuture("posterior path needs the ground-truth future")

        if mode == "prior_mean":
            z = T.reshape(T.expand(mu_p, (k, b, L)), (k * b, L))
        elif mode == "posterior_mean":
            z = T.reshape(T.expand(q[0], (k, b, L)), (k * b, L))
        else:
            mu, logvar = q if q is not None else (mu_p, logvar_p)
            rng = rng if rng is not None else np.random.default_rng(0)
            eps = rng.standard_normal((k, b, L))
            std = T.exp(T.mul(logvar, 0.5))
            z = T.add(T.expand(mu, (k, b, L)), T.mul(T.expand(std, (k, b, L)), eps))
            z = T.reshape(z, (k * b, L))
        return z, kld, {"prior": (mu_p, logvar_p), "posterior": q}

    def decode_future(self, enc: Tensor, z: Tensor, future_ego: np.ndarray):
        """Causally masked decoding of ``tau`` steps for each of the ``k*b`` latents."""
        b, o, D = enc.shape
        kb, L = z.shape
        k = kb // b
        tau = future_ego.shape[1]
        enc_k = T.reshape(T.expand(enc, (k, b, o, D)), (kb, o, D))
        z_t = T.transpose(T.expand(z, (o, kb, L)), (1, 0, 2))
        memory = self.latent_fuse(T.concat([enc_k, z_t], axis=-1))
        q = self.future_ego_embed(np.tile(future_ego, (k, 1, 1)))
        h = T.add(q, nn.sinusoidal_positions(tau, D))
        for block in self.decoder:
            h = block(h, memory, causal=True)
        traj = T.reshape(self.traj_head(h), (k, b, tau, 4))
        scaled = None
        if self.scaled_head is not None:
            scaled = T.reshape(self.scaled_head(h), (k, b, tau, 4))
        return traj, scaled

    def _aux_stream(self, batch: Batch) -> Tensor:
        o = batch.ego.shape[1]
        first = np.broadcast_to(batch.first_box[:, None, :], (len(batch), o, 4))
        context = self.aux_context(np.concatenate([batch.ego, first], axis=-1))
        query = self.aux_state(batch.state)
        stream = self.aux_proj(self.aux_cross(query, context))
        # same encoder as the main path (shared parameters)
        return self.encoder(stream)

    def reconstruct_observation(self, batch: Batch) -> Tensor:
        if not self.config.use_rot:
            raise DisabledBranch("observation reconstruction is disabled (use_rot=False)")
        return self.aux_head(self.rot_decoder(self._aux_stream(batch)))

    def poft_variant(self, batch: Batch) -> Tensor:
        if not self.config.use_poft:
            raise DisabledBranch("partial-observation future branch is disabled (use_poft=False)")
        enc = self._aux_stream(batch)
        tau, D = batch.future_ego.shape[1], self.config.model_dim
        queries = self.poft_query(np.broadcast_to(nn.sinusoidal_positions(tau, D), (len(batch), tau, D)).copy())
        return self.aux_head(self.poft_decoder(queries, enc, causal=False))

    # ------------------------------------------------------------------

    def forward(self, batch: Batch, k: int | None = None, rng=None, mode: str | None = None,
                training: bool = True) -> Outputs:
        cfg = self.config
        if mode is None:
            mode = "prior_mean" if cfg.deterministic else "sample"
        if k is None:
            k = 1 if mode != "sample" else (cfg.train_samples if training else cfg.k_samples)
        if training and batch.target is None:
            raise MissingFuture("training forward pass needs targets")
        enc = self.encode(self.stepwise_hierarchical_fuse(self.embed_modalities(batch)))
        future = batch.target if training else None
        z, kld, dists = self.cvae(enc, future, k, rng, mode)
        traj, scaled = self.decode_future(enc, z, batch.future_ego)
        aux = None
        if training and cfg.use_rot:
            aux = self.reconstruct_observation(batch)
        elif training and cfg.use_poft:
            aux = self.poft_variant(batch)
        return Outputs(traj, scaled, aux, kld, {"dists": dists, "encodings": enc})

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(tensors)
        extra = set(tensors) - set(own)
        if missing or extra:
            raise BadCheckpoint(
                f"parameter mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
            )
        for name, p in own.items():
            if tensors[name].shape != p.shape:
                raise BadCheckpoint(f"{name}: shape {tensors[name].shape} != {p.shape}")
            p.data[...] = tensors[name]

    def save(self, path, extra_header: dict | None = None) -> None:
        header = {"model": "encore", "config": self.config.to_dict()}
        header.update(extra_header or {})
        save_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path) -> "Encore":
        tensors, header = load_checkpoint(path)
        if header.get("model") != "encore" or "config" not in header:
            raise BadCheckpoint("checkpoint does not hold an ENCORE model")
        model = cls(ModelConfig.from_dict(header["config"]))
        model.load_state_dict(tensors)
        return model


def parameter_groups(names, prefix: str) -> set[str]:
    """Distinct ``<prefix>.<i>`` groups among parameter names."""
    out = set()
    for name in names:
        if name.startswith(prefix + "."):
            idx = name[len(prefix) + 1 :].split(".", 1)[0]
            out.add(f"{prefix}.{idx}")
    return out
