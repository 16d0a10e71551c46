"""Toy transformer with adapter-expert sites on its feed-forward matrices.

The base network (embeddings, attention, feed-forward, output head) is
randomly initialized and frozen; only adapter experts and gate networks
train. Every sequence in a batch is flattened into one token matrix with a
block-causal attention mask, so a training step is a single tape. Routing
stays per token: each row of a site's input gets its own selection and
renormalized weights.

Expert ordering contract: at every site, true experts come first and
placeholders last, so an expert index >= the layer's true count denotes a
placeholder everywhere (checkpoints, traces, budgets).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adapters import LoraAdapter, init_adapter, placeholder_adapter
from .allocation import AllocationPlan, SiteSpec
from .autodiff import Tape, Tensor
from .errors import ConfigError
from .gating import ExpertLayerSite, GateNetwork, TopK, select_experts, select_topk_batch

ATTN_SITE_NAMES = ("attn_q", "attn_k", "attn_v", "attn_out")
FFN_SITE_NAMES = ("ffn_in", "ffn_out")


@dataclass(frozen=True)
class ToyModelConfig:
    n_layers: int = 8
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 2
    vocab_size: int = 64
    seq_len: int = 16
    adapter_sites: str = "ffn"  # "ffn" or "ffn+attn"
    nonlinearity: str = "tanh"  # "tanh" or "relu"
    base_std: float = 0.05
    adapter_std: float = 0.02
    renorm_true_only: bool = False  # drop placeholder mass when renormalizing
    plan: AllocationPlan | None = None

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.adapter_sites not in ("ffn", "ffn+attn"):
            raise ConfigError(f"unknown adapter site selection {self.adapter_sites!r}")
        if self.nonlinearity not in ("tanh", "relu"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        for name, v in (("n_layers", self.n_layers), ("d_model", self.d_model), ("d_ff", self.d_ff),
                        ("vocab_size", self.vocab_size), ("seq_len", self.seq_len)):
            if v < 1:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.plan is not None:
            if self.plan.n_layers != self.n_layers:
                raise ConfigError(
                    f"plan covers {self.plan.n_layers} layers but the model has {self.n_layers}"
                )
            if self.plan.sites != toy_sites(self):
                raise ConfigError("plan site dimensions do not match the model geometry")


def toy_sites(cfg: ToyModelConfig) -> tuple[SiteSpec, ...]:
    """Adapter sites per layer for a given geometry. Default is the two
    feed-forward projections; attention projections are optional."""
    sites = [
        SiteSpec("ffn_in", cfg.d_ff, cfg.d_model),
        SiteSpec("ffn_out", cfg.d_model, cfg.d_ff),
    ]
    if cfg.adapter_sites == "ffn+attn":
        for name in ATTN_SITE_NAMES:
            sites.append(SiteSpec(name, cfg.d_model, cfg.d_model))
    return tuple(sites)


@dataclass
class SiteHandle:
    layer: int  # 1-based
    name: str
    site: ExpertLayerSite


class _Leaves:
    """Per-tape cache binding named arrays to leaf tensors (no copies)."""

    def __init__(self, tape: Tape) -> None:
        self.tape = tape
        self._cache: dict[str, Tensor] = {}

    def get(self, name: str, arr: np.ndarray, trainable: bool) -> Tensor:
        node = self._cache.get(name)
        if node is None:
            node = self.tape.leaf(arr, requires_grad=trainable, name=name)
            self._cache[name] = node
        return node


class ToyModel:
    """Frozen random transformer plus trainable adapter experts and gates."""

    def __init__(self, cfg: ToyModelConfig, seed: int) -> None:
        if cfg.plan is None:
            raise ConfigError("model config carries no allocation plan")
        self.cfg = cfg
        self.plan = cfg.plan
        self.seed = seed
        self.base: dict[str, np.ndarray] = {}
        self.sites: list[SiteHandle] = []
        self._masks: dict[tuple[int, int], np.ndarray] = {}
        self._init_parameters()

    # -- construction --------------------------------------------------

    def _init_parameters(self) -> None:
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        std = cfg.base_std

        def draw(shape: tuple[int, int]) -> np.ndarray:
            return rng.normal(0.0, std, size=shape)

        self.base["tok_emb"] = draw((cfg.vocab_size, cfg.d_model))
        self.base["pos_emb"] = draw((cfg.seq_len, cfg.d_model))
        for l in range(1, cfg.n_layers + 1):
            for name in ATTN_SITE_NAMES:
                self.base[f"layer{l}.{name}"] = draw((cfg.d_model, cfg.d_model))
            self.base[f"layer{l}.ffn_in"] = draw((cfg.d_ff, cfg.d_model))
            self.base[f"layer{l}.ffn_out"] = draw((cfg.d_model, cfg.d_ff))
        self.base["head"] = draw((cfg.vocab_size, cfg.d_model))

        plan = self.plan
        for l in range(1, cfg.n_layers + 1):
            n_true = plan.expert_counts[l - 1]
            n_ph = plan.placeholder_counts[l - 1]
            rank = plan.ranks[l - 1]
            for spec in plan.sites:
                experts: list[LoraAdapter] = []
                for _ in range(n_true):
                    child_seed = int(rng.integers(0, 2**63))
                    experts.append(init_adapter(spec.n, spec.m, rank, child_seed, cfg.adapter_std))
                for _ in range(n_ph):
                    experts.append(placeholder_adapter(spec.n, spec.m))
                gate = GateNetwork(weight=np.zeros((n_true + n_ph, spec.m)))
                site = ExpertLayerSite(
                    base_weight=self.base[f"layer{l}.{spec.name}"],
                    experts=experts,
                    gate=gate,
                    policy=plan.policy,
                    renorm_true_only=cfg.renorm_true_only,
                )
                self.sites.append(SiteHandle(layer=l, name=spec.name, site=site))

    def site_handle(self, layer: int, name: str) -> SiteHandle:
        for h in self.sites:
            if h.layer == layer and h.name == name:
                return h
        raise KeyError(f"no adapter site layer={layer} name={name}")

    def trainables(self) -> list[tuple[str, np.ndarray]]:
        """Named trainable arrays in a fixed order: adapters then gate, per site."""
        out: list[tuple[str, np.ndarray]] = []
        for h in self.sites:
            prefix = f"layer{h.layer}.{h.name}"
            for j, e in enumerate(h.site.experts):
                if e.is_placeholder:
                    continue
                out.append((f"{prefix}.expert{j}.a", e.a))
                out.append((f"{prefix}.expert{j}.b", e.b))
            out.append((f"{prefix}.gate", h.site.gate.weight))
        return out

    # -- forward -------------------------------------------------------

    def _block_causal_mask(self, batch: int, seq_len: int) -> np.ndarray:
        key = (batch, seq_len)
        mask = self._masks.get(key)
        if mask is None:
            n = batch * seq_len
            mask = np.full((n, n), -1e30)
            for s in range(batch):
                lo = s * seq_len
                for i in range(seq_len):
                    mask[lo + i, lo:lo + i + 1] = 0.0
            self._masks[key] = mask
        return mask

    def _nonlin(self) -> Callable[[Tensor], Tensor]:
        return ad.tanh if self.cfg.nonlinearity == "tanh" else ad.relu

    def _site_forward(
        self,
        leaves: _Leaves,
        handle: SiteHandle,
        x: Tensor,
        aux: "AuxAccumulator | None",
        collector=None,
    ) -> Tensor:
        tape = leaves.tape
        site = handle.site
        prefix = f"layer{handle.layer}.{handle.name}"
        w = leaves.get(prefix, site.base_weight, trainable=False)
        base_out = ad.matmul(x, ad.transpose(w))

        gate_w = leaves.get(f"{prefix}.gate", site.gate.weight, trainable=True)
        probs = ad.softmax_rows(ad.matmul(x, ad.transpose(gate_w)))
        probs_val = probs.value
        n_tokens, n_experts = probs_val.shape

        denom_mask = np.zeros((n_tokens, n_experts))
        if isinstance(site.policy, TopK):
            rows = select_topk_batch(probs_val, site.policy.k)
            selected: list = list(rows)
            if site.renorm_true_only:
                ph = np.array([e.is_placeholder for e in site.experts])
                member = ~ph[rows]
                t_idx = np.repeat(np.arange(n_tokens), rows.shape[1])[member.ravel()]
                denom_mask[t_idx, rows.ravel()[member.ravel()]] = 1.0
            else:
                denom_mask[np.arange(n_tokens)[:, None], rows] = 1.0
        else:
            selected = []
            for t in range(n_tokens):
                sel = select_experts(probs_val[t], site.policy)
                selected.append(sel)
                members = sel
                if site.renorm_true_only:
                    members = [i for i in sel if not site.experts[i].is_placeholder]
                denom_mask[t, members] = 1.0

        masked = ad.mul(probs, tape.const(denom_mask))
        denom_val = masked.value.sum(axis=1, keepdims=True)
        zero_rows = denom_val == 0.0  # only possible when renormalizing over true experts alone
        denom = ad.row_sum(masked)
        if zero_rows.any():
            denom = ad.add(denom, tape.const(zero_rows.astype(np.float64)))
        weights = ad.scale_rows(masked, ad.reciprocal(denom))

        adapter_sum: Tensor | None = None
        per_expert_scaled: dict[int, np.ndarray] = {}
        for j, expert in enumerate(site.experts):
            if expert.is_placeholder:
                continue
            if not np.any(weights.value[:, j]):
                continue  # no token routed here; gradient would be exactly zero
            a = leaves.get(f"{prefix}.expert{j}.a", expert.a, trainable=True)
            b = leaves.get(f"{prefix}.expert{j}.b", expert.b, trainable=True)
            delta = ad.matmul(ad.matmul(x, ad.transpose(b)), ad.transpose(a))
            if expert.delta_scale != 1.0:
                delta = ad.scale(delta, expert.delta_scale)
            scaled = ad.scale_rows(delta, ad.slice_cols(weights, j, j + 1))
            per_expert_scaled[j] = scaled.value
            adapter_sum = scaled if adapter_sum is None else ad.add(adapter_sum, scaled)

        out = base_out if adapter_sum is None else ad.add(base_out, adapter_sum)

        if aux is not None:
            aux.observe_site(site, probs, selected, tape)
        if collector is not None:
            adapter_values = (
                adapter_sum.value if adapter_sum is not None else np.zeros_like(base_out.value)
            )
            collector.record_site(
                layer=handle.layer,
                site=handle.name,
                experts=site.experts,
                selected=selected,
                weights=weights.value,
                base_out=base_out.value,
                adapter_out=adapter_values,
                per_expert_scaled=per_expert_scaled,
            )
        return out

    def forward_logits(self, tape: Tape, xs: np.ndarray, aux: "AuxAccumulator | None" = None,
                       collector=None) -> Tensor:
        """Logits for a [batch, seq_len] int token array, flattened to
        [batch*seq_len, vocab] in row-major token order."""
        cfg = self.cfg
        xs = np.asarray(xs, dtype=np.int64)
        if xs.ndim != 2 or xs.shape[1] != cfg.seq_len:
            raise ConfigError(f"expected token array [batch, {cfg.seq_len}], got {xs.shape}")
        batch, seq_len = xs.shape
        leaves = _Leaves(tape)
        sites_by_layer: dict[tuple[int, str], SiteHandle] = {
            (h.layer, h.name): h for h in self.sites
        }

        ids = xs.reshape(-1)
        positions = np.tile(np.arange(seq_len), batch)
        tok = leaves.get("tok_emb", self.base["tok_emb"], trainable=False)
        pos = leaves.get("pos_emb", self.base["pos_emb"], trainable=False)
        x = ad.add(ad.gather_rows(tok, ids), ad.gather_rows(pos, positions))

        head_dim = cfg.d_model // cfg.n_heads
        mask = tape.const(self._block_causal_mask(batch, seq_len))
        nonlin = self._nonlin()

        for l in range(1, cfg.n_layers + 1):
            h = ad.layer_norm_rows(x)

            def proj(name: str, inp: Tensor) -> Tensor:
                key = (l, name)
                if key in sites_by_layer:
                    return self._site_forward(leaves, sites_by_layer[key], inp, aux, collector)
                w = leaves.get(f"layer{l}.{name}", self.base[f"layer{l}.{name}"], trainable=False)
                return ad.matmul(inp, ad.transpose(w))

            q = proj("attn_q", h)
            k = proj("attn_k", h)
            v = proj("attn_v", h)
            heads = []
            for i in range(cfg.n_heads):
                lo, hi = i * head_dim, (i + 1) * head_dim
                qi = ad.slice_cols(q, lo, hi)
                ki = ad.slice_cols(k, lo, hi)
                vi = ad.slice_cols(v, lo, hi)
                scores = ad.scale(ad.matmul(qi, ad.transpose(ki)), 1.0 / np.sqrt(head_dim))
                attn = ad.softmax_rows(ad.add(scores, mask))
                heads.append(ad.matmul(attn, vi))
            merged = heads[0] if len(heads) == 1 else ad.concat_cols(heads)
            x = ad.add(x, proj("attn_out", merged))

            f = ad.layer_norm_rows(x)
            u = nonlin(self._site_forward(leaves, sites_by_layer[(l, "ffn_in")], f, aux, collector))
            x = ad.add(x, self._site_forward(leaves, sites_by_layer[(l, "ffn_out")], u, aux, collector))

        x = ad.layer_norm_rows(x)
        head = leaves.get("head", self.base["head"], trainable=False)
        return ad.matmul(x, ad.transpose(head))

    def loss_and_metrics(
        self,
        tape: Tape,
        xs: np.ndarray,
        ys: np.ndarray,
        mode: str,
        count_penalty: float = 0.0,
        load_balance: float = 0.0,
        collector=None,
    ) -> tuple[Tensor, dict]:
        """Cross-entropy loss (plus optional auxiliary terms) and metrics.

        mode: "all-positions" scores every position against [batch, seq_len]
        targets; "final-binary" reads a two-way label from the first two
        logits of the last position; "final-vocab" scores the last position
        over the full vocabulary.
        """
        aux = AuxAccumulator() if (count_penalty > 0.0 or load_balance > 0.0) else None
        logits = self.forward_logits(tape, xs, aux=aux, collector=collector)
        batch, seq_len = np.asarray(xs).shape

        if mode == "all-positions":
            targets = np.asarray(ys, dtype=np.int64).reshape(-1)
            scored = logits
        elif mode in ("final-binary", "final-vocab"):
            last_rows = [s * seq_len + (seq_len - 1) for s in range(batch)]
            scored = ad.gather_rows(logits, last_rows)
            if mode == "final-binary":
                scored = ad.slice_cols(scored, 0, 2)
            targets = np.asarray(ys, dtype=np.int64).reshape(-1)
        else:
            raise ConfigError(f"unknown loss mode {mode!r}")

        loss = ad.cross_entropy_mean(scored, targets)
        metrics: dict = {
            "ce_loss": float(loss.value[0, 0]),
            "accuracy": float(np.mean(np.argmax(scored.value, axis=1) == targets)),
            "aux_count": 0.0,
            "aux_balance": 0.0,
        }
        if aux is not None:
            count_mean, balance = aux.finalize(tape)
            metrics["aux_count"] = count_mean
            metrics["aux_balance"] = float(balance.value[0, 0]) if balance is not None else 0.0
            if count_penalty > 0.0:
                # piecewise-constant in the parameters: contributes value, not gradient
                loss = ad.add(loss, tape.const([[count_penalty * count_mean]]))
            if load_balance > 0.0 and balance is not None:
                loss = ad.add(loss, ad.scale(balance, load_balance))
        metrics["loss"] = float(loss.value[0, 0])
        return loss, metrics


class AuxAccumulator:
    """Collects activated-count and load-balancing statistics across sites."""

    def __init__(self) -> None:
        self.true_selected = 0
        self.tokens = 0
        self._balance_terms: list[Tensor] = []

    def observe_site(self, site: ExpertLayerSite, probs: Tensor, selected: list[list[int]],
                     tape: Tape) -> None:
        n_tokens, n_experts = probs.value.shape
        for sel in selected:
            self.true_selected += sum(1 for i in sel if not site.experts[i].is_placeholder)
        self.tokens += n_tokens

        sel_mask = np.zeros((n_tokens, n_experts))
        for t, sel in enumerate(selected):
            sel_mask[t, sel] = 1.0
        ones = tape.const(np.full((1, n_tokens), 1.0 / n_tokens))
        importance = ad.matmul(ones, probs)  # differentiable mean probability per expert
        load = tape.const(sel_mask.mean(axis=0, keepdims=True))  # selection frequency, no gradient
        term = ad.scale(ad.matmul(importance, ad.transpose(load)), float(n_experts))
        self._balance_terms.append(term)

    def finalize(self, tape: Tape) -> tuple[float, Tensor | None]:
        count_mean = self.true_selected / self.tokens if self.tokens else 0.0
        if not self._balance_terms:
            return count_mean, None
        total = self._balance_terms[0]
        for term in self._balance_terms[1:]:
            total = ad.add(total, term)
        return count_mean, ad.scale(total, 1.0 / len(self._balance_terms))


def build_model(cfg: ToyModelConfig, seed: int) -> ToyModel:
    """Frozen base + plan-driven adapter sites; gates start at zero so
    routing is uniform at step 0."""
    return ToyModel(cfg, seed)
