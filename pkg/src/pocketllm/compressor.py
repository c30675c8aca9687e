"""Train the encoder / codebook / decoder triple on weight matrices.

The per-layer objective is

    loss = sqrt(sum_i ||S_i - S_hat_i||^2) + lambda * sum_i ||Z_i - Z'_i||^2

minimized with Adam. Gradients cross the non-differentiable codebook
lookup with the straight-through estimator: the gradient arriving at the
decoder input is handed unchanged to the encoder output, and the
codebook itself moves only through the quantization term (symmetric pull
by default, optional commitment-style split). Batches are whole row
groups because the grouped normalization couples the subvectors of a
row. During stochastic steps both loss terms are rescaled to full-set
estimates (sqrt(batch * N / batch_N) for the reconstruction term) so
different batch sizes are comparable.

The encoder is kept on the estimator and the training report for reuse
and debugging but is never part of the stored artifact.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .codebook import (
    assign_nearest,
    init_codebook,
    lloyd_recenter,
    refresh_dead_codewords,
    ste_route,
    usage_counts,
    vq_loss,
)
from .metrics import EXPORT_HEADER, LayerMetrics, layer_metrics
from .nets import MetaNet, MetaNetConfig
from .optim import Adam
from .pocket_format import CompressedLayer, CompressedModel, fp16_decode, fp16_encode
from .tensor_store import LINEAR_ROLES, SubvectorSet, merge, split_rows
from .validation import as_weight_matrix, check_divides, check_positive_int


@dataclass
class EpochRecord:
    epoch: int
    vq_sum: float
    mse_mean: float
    rmse: float
    mse_top100: float


@dataclass
class UsageSummary:
    total: int
    used: int
    dead: int
    max_count: int


@dataclass
class TrainReport:
    """Per-epoch losses and final artifact-level metrics for one layer."""

    layer: str
    records: list[EpochRecord]
    final: LayerMetrics
    usage: UsageSummary
    wall_time: float
    codebook_frozen: bool
    diverged: bool
    refreshed_total: int
    config: dict
    encoder: MetaNet | None = None  # debug sidecar only

    def to_text(self):
        lines = [EXPORT_HEADER, "epoch,vq_sum,mse_mean,rmse,mse_top100"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.vq_sum!r},{r.mse_mean!r},{r.rmse!r},{r.mse_top100!r}"
            )
        return "\n".join(lines) + "\n"


def _epoch_eval(encoder, decoder, cb_vectors, s, group, lam):
    """Full-set losses with the current (unquantized) parameters."""
    z, _ = encoder.forward(s, group)
    assign = assign_nearest(z, cb_vectors)
    s_hat, _ = decoder.forward(assign.quantized, group)
    m = layer_metrics(s, s_hat, z, assign.quantized)
    loss = m.rmse + lam * m.vq_sum
    return m, loss, z, assign


class _Engine:
    """Owns one encoder/decoder/codebook triple plus optimizer state.

    per_layer compression uses a fresh engine per layer; per_block reuses
    one engine across every layer of a block.
    """

    def __init__(self, p, seed):
        self.p = p
        self.seed = seed
        dtype = np.float64 if p["dtype"] == "float64" else np.float32
        self.dtype = dtype
        enc_cfg = MetaNetConfig(
            width=p["d"],
            layers=p["mlp_layers"],
            hidden=p["hidden"],
            bias=p["use_bias"],
            residual="after_first",
            norm=p["norm"],
        )
        dec_cfg = MetaNetConfig(
            width=p["d"],
            layers=p["mlp_layers"],
            hidden=p["hidden"],
            bias=p["use_bias"],
            residual="except_last",
            norm=p["norm"],
        )
        self.encoder = MetaNet(enc_cfg, seed=[seed, 1], dtype=dtype)
        self.decoder = MetaNet(dec_cfg, seed=[seed, 2], dtype=dtype)
        self.cb_vectors = None
        self.rng = np.random.default_rng([seed, 3])
        self.adam_e = Adam(lr=p["lr"])
        self.adam_d = Adam(lr=p["lr"])
        self.adam_c = Adam(lr=p["lr"])

    def _ensure_codebook(self, s, group):
        if self.cb_vectors is not None:
            return
        p = self.p
        if p["data_init"]:
            z0, _ = self.encoder.forward(s, group)
            cb = init_codebook(p["k"], p["d"], seed=[self.seed, 4], latents=z0)
        else:
            cb = init_codebook(p["k"], p["d"], seed=[self.seed, 4])
        self.cb_vectors = cb.vectors.astype(np.float64)

    def _apply(self, net, adam, grads):
        params = dict(net.param_items())
        updated = adam.step(params, grads)
        for name, value in updated.items():
            net.set_param(name, value)

    def _step(self, s_batch, group, n_total, lam):
        p = self.p
        z, ecache = self.encoder.forward(s_batch, group)
        assign = assign_nearest(z, self.cb_vectors)
        s_hat, dcache = self.decoder.forward(assign.quantized, group)

        scale = n_total / s_batch.shape[0]
        diff = s_hat - s_batch
        q = float(np.sum(diff * diff))
        if q > 0.0:
            g_shat = (scale * diff) / math.sqrt(scale * q)
        else:
            g_shat = np.zeros_like(diff)
        dgrads, d_zq = self.decoder.backward(g_shat, dcache)

        g_z = np.array(ste_route(d_zq), dtype=np.float64, copy=True)
        _, g_z_vq, g_c = vq_loss(z, assign.quantized, assign.indices, p["k"])
        beta = p["commitment_beta"]
        enc_pull = lam * scale * (beta if beta is not None else 1.0)
        g_z += enc_pull * g_z_vq
        egrads, _ = self.encoder.backward(g_z, ecache)

        self._apply(self.encoder, self.adam_e, egrads)
        self._apply(self.decoder, self.adam_d, dgrads)
        if lam > 0.0:
            updated = self.adam_c.step(
                {"codebook": self.cb_vectors}, {"codebook": lam * scale * g_c}
            )
            self.cb_vectors = updated["codebook"]
        return assign.indices

    def train_layer(self, s, group):
        """Run the epoch loop on one layer's subvectors; returns records."""
        p = self.p
        lam = p["vq_weight"]
        self._ensure_codebook(s, group)
        n_total = s.shape[0]
        n_groups = n_total // group
        batch_groups = max(1, min(p["batch_rows"], n_groups))

        records = []
        diverged = False
        refreshed_total = 0
        _, loss0, _, _ = _epoch_eval(
            self.encoder, self.decoder, self.cb_vectors, s, group, lam
        )
        best = (loss0, self.encoder.flatten(), self.decoder.flatten(), self.cb_vectors.copy())
        guard = 10.0 * loss0 if math.isfinite(loss0) and loss0 > 0 else math.inf

        for epoch in range(1, p["epochs"] + 1):
            if p["lr_decay"] == "cosine":
                lr = p["lr"] * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / p["epochs"]))
                self.adam_e.lr = self.adam_d.lr = self.adam_c.lr = lr
            order = self.rng.permutation(n_groups)
            try:
                for start in range(0, n_groups, batch_groups):
                    rows = order[start : start + batch_groups]
                    take = (rows[:, None] * group + np.arange(group)[None, :]).ravel()
                    self._step(s[take], group, n_total, lam)
            except ValueError:
                diverged = True  # non-finite gradients
            m, loss, z_full, assign = _epoch_eval(
                self.encoder, self.decoder, self.cb_vectors, s, group, lam
            )
            records.append(
                EpochRecord(epoch, m.vq_sum, m.mse_mean, m.rmse, m.mse_top100)
            )
            if not diverged and (not math.isfinite(loss) or loss > guard):
                diverged = True
            if diverged:
                _, enc_flat, dec_flat, cb = best
                self.encoder.load_flat(enc_flat)
                self.decoder.load_flat(dec_flat)
                self.cb_vectors = cb
                break
            if loss < best[0]:
                best = (loss, self.encoder.flatten(), self.decoder.flatten(), self.cb_vectors.copy())
            if epoch < p["epochs"]:
                if p["refresh_dead"]:
                    counts = usage_counts(assign.indices, p["k"])
                    self.cb_vectors, n_ref = refresh_dead_codewords(
                        self.cb_vectors, counts, z_full, self.rng
                    )
                    refreshed_total += n_ref
                if p["lloyd_every"] and epoch % p["lloyd_every"] == 0:
                    self.cb_vectors = lloyd_recenter(self.cb_vectors, z_full, assign.indices)
        return records, diverged, refreshed_total

    def finalize(self, s, group, name, role, block_index, d_in, d_out, shared_with=None):
        """Quantize the codec and build the artifact plus its final metrics.

        The stored codebook is half precision and the stored decoder is
        float32; indices and final metrics are computed against those
        quantized values so that reconstruction from the artifact matches
        the reported numbers exactly.
        """
        p = self.p
        cb_bits = fp16_encode(self.cb_vectors.astype(np.float32))
        dec_flat = self.decoder.flatten().astype(np.float32)
        dec_q = self.decoder.copy()
        dec_q.load_flat(dec_flat.astype(np.float64))
        cb_q = fp16_decode(cb_bits).astype(np.float64)

        z, _ = self.encoder.forward(s, group)
        assign = assign_nearest(z, cb_q)
        s_hat, _ = dec_q.forward(assign.quantized, group)
        final = layer_metrics(s, s_hat, z, assign.quantized)
        counts = usage_counts(assign.indices, p["k"])
        usage = UsageSummary(
            total=p["k"],
            used=int((counts > 0).sum()),
            dead=int((counts == 0).sum()),
            max_count=int(counts.max()),
        )
        cl = CompressedLayer(
            name=name,
            role=role,
            block_index=block_index,
            d_in=d_in,
            d_out=d_out,
            d=p["d"],
            k=p["k"],
            codebook_fp16=cb_bits,
            indices=assign.indices,
            decoder_layers=p["mlp_layers"],
            decoder_hidden=self.decoder.config.hidden,
            decoder_bias=p["use_bias"],
            decoder_norm=p["norm"],
            decoder_activation="gelu",
            decoder_params=dec_flat,
            shared_with=shared_with,
        ).validate()
        return cl, final, usage


def decoder_from_layer(cl):
    """Rebuild the stored decoder network of a CompressedLayer."""
    cfg = MetaNetConfig(
        width=cl.d,
        layers=cl.decoder_layers,
        hidden=cl.decoder_hidden,
        bias=cl.decoder_bias,
        residual="except_last",
        norm=cl.decoder_norm,
        activation=cl.decoder_activation,
    )
    net = MetaNet(cfg, seed=0, dtype=np.float64)
    net.load_flat(np.asarray(cl.decoder_params, dtype=np.float64))
    return net


def reconstruct_layer(cl):
    """Decode a CompressedLayer back to its (d_in, d_out) weight matrix.

    A pure function of the artifact: gather the half-precision codewords
    by index, run the stored decoder with row-grouped normalization, and
    merge the subvectors.
    """
    cl.validate()
    cb = fp16_decode(np.asarray(cl.codebook_fp16)).astype(np.float64)
    if cl.indices.max(initial=0) >= cl.k:
        raise ValueError("index out of codebook range")
    z_q = cb[cl.indices]
    net = decoder_from_layer(cl)
    s_hat, _ = net.forward(z_q, cl.L)
    return merge(SubvectorSet(data=s_hat, d=cl.d, L=cl.L, d_in=cl.d_in, origin=cl.name))


class LatentCodebookCompressor(BaseEstimator, TransformerMixin):
    """Compress a weight matrix by vector-quantizing encoder latents of its subvectors.

    fit() cuts the matrix rows into subvectors of length subvector_len,
    trains a small encoder MLP, a codebook of codebook_size latent
    codewords, and a decoder MLP, then freezes the artifact (half
    precision codebook, float32 decoder). transform() maps a compatible
    matrix to codeword indices; inverse_transform() decodes indices back
    to a weight matrix.

    Parameters
    ----------
    subvector_len : length d of the row pieces being quantized.
    codebook_size : number of latent codewords K.
    mlp_layers, hidden : encoder/decoder depth and hidden width; hidden
        defaults to round(2.5 * subvector_len).
    use_bias : include bias vectors in the linear layers.
    norm : "rln" (row-grouped normalization), "ln" (per-subvector), or "none".
    epochs, batch_rows, lr : training budget; batch_rows counts whole
        weight-matrix rows per step.
    lr_decay : "none" keeps lr fixed; "cosine" anneals it to zero over
        the epochs, which lets runs settle despite the square-root
        reconstruction term's non-vanishing gradients.
    vq_weight : weight of the latent quantization term in the loss.
    commitment_beta : None for the symmetric codebook pull; a float
        switches to the commitment-style split where the encoder side is
        scaled by beta.
    data_init : initialize the codebook from the per-dimension moments of
        the initial latents instead of the standard normal.
    refresh_dead : re-seed unused codewords from latents once per epoch.
    lloyd_every : if > 0, recenter used codewords on their latent means
        every that many epochs.
    seed : RNG seed for parameters, codebook, and batch order.
    dtype : "float64" (default) or "float32" training arithmetic.

    Attributes
    ----------
    encoder_ : trained encoder MetaNet (not part of the artifact).
    codebook_ : (K, d) float64 codewords after half-precision rounding.
    indices_ : codeword index of every fitted subvector.
    layer_ : the CompressedLayer artifact.
    report_ : TrainReport with per-epoch losses and final metrics.
    """

    def __init__(
        self,
        subvector_len=8,
        codebook_size=4096,
        mlp_layers=3,
        hidden=None,
        use_bias=True,
        norm="rln",
        epochs=25,
        batch_rows=64,
        lr=1e-3,
        lr_decay="none",
        vq_weight=1.0,
        commitment_beta=None,
        data_init=True,
        refresh_dead=True,
        lloyd_every=0,
        seed=0,
        dtype="float64",
    ):
        self.subvector_len = subvector_len
        self.codebook_size = codebook_size
        self.mlp_layers = mlp_layers
        self.hidden = hidden
        self.use_bias = use_bias
        self.norm = norm
        self.epochs = epochs
        self.batch_rows = batch_rows
        self.lr = lr
        self.lr_decay = lr_decay
        self.vq_weight = vq_weight
        self.commitment_beta = commitment_beta
        self.data_init = data_init
        self.refresh_dead = refresh_dead
        self.lloyd_every = lloyd_every
        self.seed = seed
        self.dtype = dtype

    def _resolved(self):
        p = {
            "d": check_positive_int(self.subvector_len, "subvector_len"),
            "k": check_positive_int(self.codebook_size, "codebook_size"),
            "mlp_layers": check_positive_int(self.mlp_layers, "mlp_layers"),
            "hidden": self.hidden,
            "use_bias": bool(self.use_bias),
            "norm": self.norm,
            "epochs": int(self.epochs),
            "batch_rows": check_positive_int(self.batch_rows, "batch_rows"),
            "lr": float(self.lr),
            "lr_decay": self.lr_decay,
            "vq_weight": float(self.vq_weight),
            "commitment_beta": None
            if self.commitment_beta is None
            else float(self.commitment_beta),
            "data_init": bool(self.data_init),
            "refresh_dead": bool(self.refresh_dead),
            "lloyd_every": int(self.lloyd_every),
            "seed": self.seed,
            "dtype": self.dtype,
        }
        if p["k"] < 2:
            raise ValueError("codebook_size must be >= 2")
        if p["epochs"] < 0:
            raise ValueError("epochs must be >= 0")
        if p["vq_weight"] < 0:
            raise ValueError("vq_weight must be >= 0")
        if p["lr_decay"] not in ("none", "cosine"):
            raise ValueError("lr_decay must be 'none' or 'cosine'")
        if p["dtype"] not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")
        return p

    def fit(self, X, y=None, layer_name="layer", role="other", block_index=0):
        """Train on one (d_in, d_out) weight matrix."""
        p = self._resolved()
        w = as_weight_matrix(X, dtype=np.float64)
        check_divides(p["d"], w.shape[1])
        started = time.perf_counter()
        engine = _Engine(p, seed=p["seed"])
        sset = split_rows(w, p["d"], origin=layer_name)
        records, diverged, refreshed = engine.train_layer(sset.data, sset.L)
        cl, final, usage = engine.finalize(
            sset.data, sset.L, layer_name, role, block_index, sset.d_in, sset.d * sset.L
        )
        self.layer_ = cl
        self.encoder_ = engine.encoder
        self.codebook_ = fp16_decode(cl.codebook_fp16).astype(np.float64)
        self.indices_ = cl.indices
        self.d_in_ = sset.d_in
        self.d_out_ = w.shape[1]
        self.L_ = sset.L
        self.n_subvectors_ = sset.n
        self.report_ = TrainReport(
            layer=layer_name,
            records=records,
            final=final,
            usage=usage,
            wall_time=time.perf_counter() - started,
            codebook_frozen=p["vq_weight"] == 0.0,
            diverged=diverged,
            refreshed_total=refreshed,
            config=p,
            encoder=engine.encoder,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "layer_"):
            raise NotFittedError("this compressor has not been fitted yet")

    def transform(self, X):
        """Codeword indices for a matrix compatible with the fitted widths."""
        self._check_fitted()
        w = as_weight_matrix(X, dtype=np.float64)
        L = check_divides(self.layer_.d, w.shape[1])
        sset = split_rows(w, self.layer_.d)
        z, _ = self.encoder_.forward(sset.data, L)
        return assign_nearest(z, self.codebook_).indices

    def inverse_transform(self, indices=None, d_in=None):
        """Decode codeword indices back to a weight matrix.

        With no arguments, reconstructs the fitted layer.
        """
        self._check_fitted()
        if indices is None:
            return reconstruct_layer(self.layer_)
        indices = np.asarray(indices, dtype=np.int64)
        d_in = self.d_in_ if d_in is None else int(d_in)
        if indices.ndim != 1 or indices.size % d_in != 0:
            raise ValueError(
                f"cannot group {indices.size} indices into rows of d_in={d_in}"
            )
        stub = CompressedLayer(
            name=self.layer_.name,
            role=self.layer_.role,
            block_index=self.layer_.block_index,
            d_in=d_in,
            d_out=(indices.size // d_in) * self.layer_.d,
            d=self.layer_.d,
            k=self.layer_.k,
            codebook_fp16=self.layer_.codebook_fp16,
            indices=indices,
            decoder_layers=self.layer_.decoder_layers,
            decoder_hidden=self.layer_.decoder_hidden,
            decoder_bias=self.layer_.decoder_bias,
            decoder_norm=self.layer_.decoder_norm,
            decoder_activation=self.layer_.decoder_activation,
            decoder_params=self.layer_.decoder_params,
        )
        return reconstruct_layer(stub)

    def reconstruct(self):
        """Reconstruction of the fitted matrix from the artifact."""
        return self.inverse_transform()


def compress_layer(w, name="layer", role="other", block_index=0, **params):
    """One-call per-layer compression; returns (CompressedLayer, TrainReport)."""
    est = LatentCodebookCompressor(**params)
    est.fit(w, layer_name=name, role=role, block_index=block_index)
    return est.layer_, est.report_


def _layer_seed(base, ordinal):
    return [0 if base is None else int(base), 1000 + ordinal]


def _compress_block(entries_with_ordinal, manifest, p, base_seed):
    """Train one shared engine over every layer of a block, in order.

    Indices and final metrics for every layer are computed against the
    end-of-block codec so reconstruction from the shared artifact is
    self-consistent.
    """
    (first_ordinal, _) = entries_with_ordinal[0]
    engine = _Engine(p, seed=_layer_seed(base_seed, first_ordinal))
    staged = []
    results = []
    for _, e in entries_with_ordinal:
        w = manifest.load_weights(e.name).astype(np.float64)
        check_divides(p["d"], w.shape[1])
        sset = split_rows(w, p["d"], origin=e.name)
        started = time.perf_counter()
        records, diverged, refreshed = engine.train_layer(sset.data, sset.L)
        staged.append((e, sset, records, diverged, refreshed, time.perf_counter() - started))
    owner_name = None
    for e, sset, records, diverged, refreshed, wall in staged:
        cl, final, usage = engine.finalize(
            sset.data,
            sset.L,
            e.name,
            e.role,
            e.block_index,
            sset.d_in,
            sset.d * sset.L,
            shared_with=owner_name,
        )
        if owner_name is None:
            owner_name = e.name
        report = TrainReport(
            layer=e.name,
            records=records,
            final=final,
            usage=usage,
            wall_time=wall,
            codebook_frozen=p["vq_weight"] == 0.0,
            diverged=diverged,
            refreshed_total=refreshed,
            config=p,
            encoder=engine.encoder,
        )
        results.append((cl, report))
    return results


def compress_model(manifest, roles=None, scope="per_layer", jobs=1, **params):
    """Compress every selected layer of a manifest.

    roles: iterable of role names; defaults to the seven linear-layer
    roles (a layer tagged "other" is included only when asked for
    explicitly). scope "per_block" shares one encoder/decoder/codebook
    across all selected layers of a block. Per-layer failures are
    collected on the result instead of aborting the run.
    """
    if scope not in ("per_layer", "per_block"):
        raise ValueError(f"scope must be per_layer or per_block, got {scope!r}")
    wanted = set(LINEAR_ROLES if roles is None else roles)
    selected = [(i, e) for i, e in enumerate(manifest.layers) if e.role in wanted]
    proto = LatentCodebookCompressor(**params)
    p = proto._resolved()
    base_seed = p["seed"]
    model = CompressedModel(scope=scope)
    results = {}

    if scope == "per_layer":
        def run_one(item):
            ordinal, e = item
            w = manifest.load_weights(e.name).astype(np.float64)
            sub = dict(params)
            sub["seed"] = _layer_seed(base_seed, ordinal)
            return compress_layer(
                w, name=e.name, role=e.role, block_index=e.block_index, **sub
            )

        if jobs > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(run_one, item): item for item in selected}
                for fut, item in futures.items():
                    _, e = item
                    try:
                        results[e.name] = fut.result()
                    except Exception as exc:  # noqa: BLE001 - per-layer ledger
                        model.failures.append((e.name, str(exc)))
        else:
            for item in selected:
                _, e = item
                try:
                    results[e.name] = run_one(item)
                except Exception as exc:  # noqa: BLE001
                    model.failures.append((e.name, str(exc)))
    else:
        blocks = {}
        for item in selected:
            blocks.setdefault(item[1].block_index, []).append(item)

        def run_block(items):
            return _compress_block(items, manifest, p, base_seed)

        block_items = sorted(blocks.items())
        if jobs > 1 and len(block_items) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = {
                    pool.submit(run_block, items): (bi, items)
                    for bi, items in block_items
                }
                for fut, (bi, items) in futures.items():
                    try:
                        for cl, report in fut.result():
                            results[cl.name] = (cl, report)
                    except Exception as exc:  # noqa: BLE001
                        for _, e in items:
                            model.failures.append((e.name, str(exc)))
        else:
            for bi, items in block_items:
                try:
                    for cl, report in run_block(items):
                        results[cl.name] = (cl, report)
                except Exception as exc:  # noqa: BLE001
                    for _, e in items:
                        model.failures.append((e.name, str(exc)))

    # manifest order regardless of completion order
    for _, e in selected:
        if e.name in results:
            cl, report = results[e.name]
            model.layers.append(cl)
            model.reports[e.name] = report
    return model


def resolved_config_json(params_dict):
    """Stable JSON line for logging the exact configuration of a run."""
    return json.dumps(params_dict, sort_keys=True, default=str)
