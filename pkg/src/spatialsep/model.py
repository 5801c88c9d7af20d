"""End-to-end separation model.

Learned encoder on the reference channel, optional spatial feature blocks
(IPD, MCS or ICD) stacked onto the encoder output, a dilated temporal
convolutional separator producing one sigmoid mask per speaker, and a learned
overlap-add decoder.
"""
from __future__ import annotations

import numpy as np

from . import features as feat
from .autodiff import BatchNormState, Parameter, Tensor, load_checkpoint, ops, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, DataError

MODEL_FORMAT = "spatialsep-model"


class SeparationModel:
    def __init__(self, config: RunConfig, seed: int = 0):
        self.config = config.validate()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
        fc, ec, sc = config.features, config.encoder, config.separator
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}

        n, length = ec.num_filters, ec.window_len
        self._add("encoder.basis", rng.standard_normal((n, 1, length)) / np.sqrt(length))
        self._add("decoder.basis", rng.standard_normal((n, length)) / np.sqrt(n))

        self.pair_specs = fc.pair_specs() if (fc.uses_icd or fc.uses_ipd) else []
        self.pairs = feat.all_pairs(self.pair_specs) if self.pair_specs else []
        self.mcs = self.icd = None
        rows = n
        if fc.uses_mcs:
            self.mcs = feat.McsFilterBank(fc.mcs_filters, fc.channels, length, rng)
            self.params[self.mcs.K.name] = self.mcs.K
            rows += fc.mcs_filters
        if fc.uses_icd:
            self.icd = feat.IcdFilterBank(fc.icd_filters, length, fc.w2_mode, rng)
            for p in self.icd.parameters():
                self.params[p.name] = p
            rows += len(self.pairs) * fc.icd_filters
        if fc.uses_ipd:
            rows += 2 * len(self.pairs) * (fc.n_fft // 2 + 1)
        self.input_rows = rows

        b, h, p = sc.bottleneck, sc.hidden, sc.kernel_size
        self._norm("sep.input", rows)
        self._conv("sep.bottleneck", b, rows, 1, rng)
        for i in range(sc.repeats * sc.blocks):
            pre = f"sep.block{i}"
            self._conv(f"{pre}.in", h, b, 1, rng)
            self._add(f"{pre}.prelu1", np.full(h, 0.25))
            self._norm(f"{pre}.norm1", h)
            self._conv(f"{pre}.depthwise", h, 1, p, rng)
            self._add(f"{pre}.prelu2", np.full(h, 0.25))
            self._norm(f"{pre}.norm2", h)
            self._conv(f"{pre}.res", b, h, 1, rng)
            self._conv(f"{pre}.skip", b, h, 1, rng)
        self._add("sep.out.prelu", np.full(b, 0.25))
        self._conv("sep.mask", sc.speakers * n, b, 1, rng)

    # construction helpers

    def _add(self, name, value, trainable=True):
        self.params[name] = Parameter(name, value, trainable)

    def _conv(self, name, cout, cin, k, rng):
        self._add(f"{name}.w", rng.standard_normal((cout, cin, k)) / np.sqrt(cin * k))
        self._add(f"{name}.b", np.zeros((cout, 1)))

    def _norm(self, name, channels):
        self._add(f"{name}.gamma", np.ones(channels))
        self._add(f"{name}.beta", np.zeros(channels))
        self.bn[name] = BatchNormState(channels)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    # layers

    def _pw(self, name, x, dilation=1, groups=1, pad=0):
        if pad:
            x = ops.pad_last(x, pad, pad)
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        return ops.add(ops.conv1d(x, w, dilation=dilation, groups=groups), b)

    def _bn(self, name, x, training):
        return ops.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                              self.bn[name], training)

    @staticmethod
    def _prelu(x, alpha):
        return ops.prelu(x, ops.reshape(alpha, (alpha.shape[0], 1)))

    # forward passes

    def encode(self, reference) -> Tensor:
        """Reference channel ``[B, T]`` -> nonnegative encode ``[B, N, frames]``."""
        ec = self.config.encoder
        x = reference if isinstance(reference, Tensor) else Tensor(np.asarray(reference, float))
        if x.shape[-1] < ec.window_len:
            raise DataError(f"input of {x.shape[-1]} samples is shorter than the {ec.window_len}-sample window")
        x = ops.reshape(x, (x.shape[0], 1, x.shape[-1]))
        return ops.relu(ops.conv1d(x, self.params["encoder.basis"], stride=ec.stride))

    def feature_stack(self, mixture: np.ndarray, encode: Tensor) -> feat.FeatureTensor:
        fc, ec = self.config.features, self.config.encoder
        blocks = [("encoder", encode)]
        if fc.kind != "encoder" and mixture.shape[1] != fc.channels:
            raise DataError(f"model expects {fc.channels} channels, got {mixture.shape[1]}")
        if self.mcs is not None:
            blocks.append(("mcs", feat.compute_mcs(mixture, self.mcs, hop=ec.stride)))
        if self.icd is not None:
            blocks.append(("icd", feat.compute_icd(mixture, self.icd, self.pair_specs, hop=ec.stride)))
        if fc.uses_ipd:
            cos_ipd, sin_ipd = feat.compute_ipd(mixture, self.pairs, ec.window_len, ec.stride, fc.n_fft)
            blocks += [("cos_ipd", cos_ipd), ("sin_ipd", sin_ipd)]
        stacked = feat.assemble_features(blocks)
        if stacked.num_features != self.input_rows:
            raise ConfigError(f"feature layout has {stacked.num_features} rows, model expects {self.input_rows}")
        return stacked

    def separator(self, features: Tensor, training: bool) -> Tensor:
        """``[B, rows, frames]`` -> masks ``[B, S, N, frames]`` in (0, 1)."""
        sc, n = self.config.separator, self.config.encoder.num_filters
        if features.shape[1] != self.input_rows:
            raise DataError(f"separator expects {self.input_rows} feature rows, got {features.shape[1]}")
        x = self._bn("sep.input", features, training)
        x = self._pw("sep.bottleneck", x)
        skips = None
        p = sc.kernel_size
        for i in range(sc.repeats * sc.blocks):
            pre = f"sep.block{i}"
            dilation = 2 ** (i % sc.blocks)
            y = self._pw(f"{pre}.in", x)
            y = self._bn(f"{pre}.norm1", self._prelu(y, self.params[f"{pre}.prelu1"]), training)
            y = self._pw(f"{pre}.depthwise", y, dilation=dilation, groups=sc.hidden,
                         pad=(p - 1) * dilation // 2)
            y = self._bn(f"{pre}.norm2", self._prelu(y, self.params[f"{pre}.prelu2"]), training)
            x = ops.add(x, self._pw(f"{pre}.res", y))
            skip = self._pw(f"{pre}.skip", y)
            skips = skip if skips is None else ops.add(skips, skip)
        y = self._prelu(skips, self.params["sep.out.prelu"])
        logits = self._pw("sep.mask", y)
        b, _, frames = logits.shape
        return ops.sigmoid(ops.reshape(logits, (b, sc.speakers, n, frames)))

    def decode(self, masked: Tensor) -> Tensor:
        """``[B, S, N, frames]`` -> waveforms ``[B, S, (frames-1)*stride + L]``."""
        b, s, n, frames = masked.shape
        flat = ops.reshape(masked, (b * s, n, frames))
        wave = ops.transposed_conv1d(flat, self.params["decoder.basis"], self.config.encoder.stride)
        return ops.reshape(wave, (b, s, wave.shape[-1]))

    def forward(self, mixture, training: bool = False) -> dict:
        """Run the whole pipeline on ``[B, C, T]`` (or ``[C, T]``) samples."""
        mixture = np.asarray(mixture, dtype=np.float64)
        if mixture.ndim == 2:
            mixture = mixture[None]
        if not np.all(np.isfinite(mixture)):
            raise DataError("mixture contains non-finite samples")
        encode = self.encode(mixture[:, 0])
        stacked = self.feature_stack(mixture, encode)
        masks = self.separator(stacked.values, training)
        frames = masks.shape[-1]
        if encode.shape[-1] != frames:
            encode = ops.getitem(encode, (Ellipsis, slice(0, frames)))
        b, n = encode.shape[0], encode.shape[1]
        masked = ops.mul(ops.reshape(encode, (b, 1, n, frames)), masks)
        return {"estimates": self.decode(masked), "masks": masks, "encode": encode,
                "features": stacked}

    def separate(self, mixture) -> np.ndarray:
        """Inference on one ``[C, T]`` mixture; returns ``[S, T']``."""
        return self.forward(np.asarray(mixture)[None], training=False)["estimates"].value[0]

    def output_length(self, num_samples: int) -> int:
        ec = self.config.encoder
        frames = (num_samples - ec.window_len) // ec.stride + 1
        return (frames - 1) * ec.stride + ec.window_len

    # persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param/{k}": p.value for k, p in self.params.items()}
        for k, s in self.bn.items():
            arrays[f"bn/{k}/mean"] = s.running_mean
            arrays[f"bn/{k}/var"] = s.running_var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            key = f"param/{k}"
            if key not in arrays:
                raise DataError(f"checkpoint lacks parameter {k!r}")
            if arrays[key].shape != p.value.shape:
                raise DataError(f"parameter {k!r}: checkpoint shape {arrays[key].shape} != {p.value.shape}")
            p.value = arrays[key].copy()
            p.zero_grad()
        for k, s in self.bn.items():
            s.running_mean = arrays[f"bn/{k}/mean"].copy()
            s.running_var = arrays[f"bn/{k}/var"].copy()

    def save(self, path, extra_arrays=None, extra_header=None) -> None:
        header = {"format": MODEL_FORMAT, "config": self.config.to_dict(),
                  "pairs": [list(p) for p in self.pairs],
                  "receptive_field_frames": self.config.separator.receptive_field()}
        header.update(extra_header or {})
        arrays = self.state_arrays()
        arrays.update(extra_arrays or {})
        save_checkpoint(path, arrays, header)

    @classmethod
    def load(cls, path) -> tuple["SeparationModel", dict, dict]:
        """Returns ``(model, header, arrays)`` so callers can restore extra state."""
        arrays, header = load_checkpoint(path)
        if header.get("format") != MODEL_FORMAT:
            raise DataError(f"{path} is not a separation model checkpoint")
        model = cls(RunConfig.from_dict(header["config"]))
        model.load_state_arrays(arrays)
        return model, header, arrays
