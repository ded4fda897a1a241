"""Dense-encoder / Self-ONN-decoder segmentation network.

Layout for ``B`` stages (default 5)::

    stem 3x3 -> [dense block -> skip_i -> transition]  x B      (encoder)
    [upsample2x -> concat skip_{B-1-j} -> Self-ONN -> tanh]  x B  (decoder)
    1x1 head -> NUM_CLASSES logits

There is no bottleneck between the deepest transition and the first
decoder block.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .selfonn import SelfOnnBlock, SelfOnnLayer
from .tensor import (
    Tensor,
    avgpool2d,
    backward,
    concat_channels,
    conv2d,
    log_softmax,
    no_grad,
    softmax,
    tanh,
    upsample2x,
)

logger = logging.getLogger(__name__)

NUM_CLASSES = 10
FOREGROUND_CLASSES = tuple(range(1, NUM_CLASSES))
SUPPORTED_DECODER_BLOCKS = (3, 5, 7)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DenseEncoderConfig:
    growth_rate: int = 8
    block_layer_counts: tuple[int, ...] = (2, 2, 4, 4, 4)
    initial_channels: int = 16
    input_size: int = 96

    def __post_init__(self):
        self.block_layer_counts = tuple(int(n) for n in self.block_layer_counts)
        if self.growth_rate < 1 or self.initial_channels < 1:
            raise ValueError("growth_rate and initial_channels must be positive")
        if any(n < 0 for n in self.block_layer_counts):
            raise ValueError("block_layer_counts entries must be non-negative")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    augmentation: bool = False
    loss_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        ce, dice = self.loss_weights
        if ce < 0 or dice < 0 or (ce == 0 and dice == 0):
            raise ValueError("loss weights must be non-negative and not both zero")


class Conv:
    """Plain convolution with LeCun-uniform init."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, pad: int | None = None):
        bound = math.sqrt(3.0 / (cin * k * k))
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, 1, self.pad)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class DenseBlock:
    """Each layer is 1x1 then 3x3 conv (tanh after each); its output is
    concatenated onto everything before it."""

    def __init__(self, in_channels: int, layer_count: int, growth_rate: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.growth_rate = growth_rate
        self.layers = []
        c = in_channels
        for _ in range(layer_count):
            width = 2 * growth_rate
            self.layers.append((Conv(c, width, 1, rng), Conv(width, growth_rate, 3, rng)))
            c += growth_rate
        self.out_channels = c

    def parameters(self) -> list[Tensor]:
        return [p for a, b in self.layers for p in a.parameters() + b.parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        return dense_block_forward(self, x)


def dense_block_forward(block: DenseBlock, x: Tensor) -> Tensor:
    for bottleneck, conv in block.layers:
        new = tanh(conv(tanh(bottleneck(x))))
        x = concat_channels(x, new)
    return x


class Transition:
    """1x1 conv halving channels (floor) then 2x2 average pooling."""

    def __init__(self, in_channels: int, rng: np.random.Generator):
        self.out_channels = max(1, in_channels // 2)
        self.conv = Conv(in_channels, self.out_channels, 1, rng)

    def parameters(self) -> list[Tensor]:
        return self.conv.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return transition_forward(self, x)


def transition_forward(tr: Transition, x: Tensor) -> Tensor:
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"transition: spatial extent must be even, got {h}x{w}")
    return avgpool2d(tr.conv(x), 2)


class SegNet:
    def __init__(
        self,
        enc_cfg: DenseEncoderConfig,
        decoder_blocks: int = 5,
        q: int = 3,
        dropout_rate: float = 0.1,
        seed: int = 0,
    ):
        self.enc_cfg = enc_cfg
        self.decoder_blocks = decoder_blocks
        self.q = q
        self.dropout_rate = dropout_rate
        self.seed = seed
        rng = np.random.default_rng(seed)

        g = enc_cfg.growth_rate
        self.stem = Conv(1, enc_cfg.initial_channels, 3, rng)
        self.stages: list[tuple[DenseBlock, Transition]] = []
        skip_channels = []
        c = enc_cfg.initial_channels
        for count in enc_cfg.block_layer_counts:
            block = DenseBlock(c, count, g, rng)
            trans = Transition(block.out_channels, rng)
            self.stages.append((block, trans))
            skip_channels.append(block.out_channels)
            c = trans.out_channels

        self.decoder: list[SelfOnnBlock] = []
        for j in range(decoder_blocks):
            skip = skip_channels[decoder_blocks - 1 - j]
            cout = max(g, skip // 2)
            layer = SelfOnnLayer(c + skip, cout, 3, q=q, dropout_rate=dropout_rate, rng=rng)
            self.decoder.append(SelfOnnBlock(layer))
            c = cout
        self.head = Conv(c, NUM_CLASSES, 1, rng)

    def parameters(self) -> list[Tensor]:
        params = self.stem.parameters()
        for block, trans in self.stages:
            params += block.parameters() + trans.parameters()
        for blk in self.decoder:
            params += blk.parameters()
        return params + self.head.parameters()

    def config(self) -> dict:
        cfg = asdict(self.enc_cfg)
        cfg["block_layer_counts"] = list(self.enc_cfg.block_layer_counts)
        return {
            "encoder": cfg,
            "decoder_blocks": self.decoder_blocks,
            "q": self.q,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @property
    def input_size(self) -> int:
        return self.enc_cfg.input_size

    def __call__(self, images: Tensor, training: bool = False, seed: int = 0) -> Tensor:
        return forward(self, images, training=training, seed=seed)


def build_segnet(
    enc_cfg: DenseEncoderConfig,
    decoder_blocks: int = 5,
    q: int = 3,
    dropout_rate: float = 0.1,
    seed: int = 0,
) -> SegNet:
    if decoder_blocks not in SUPPORTED_DECODER_BLOCKS:
        raise ValueError(f"decoder_blocks must be one of {SUPPORTED_DECODER_BLOCKS}, got {decoder_blocks}")
    if len(enc_cfg.block_layer_counts) != decoder_blocks:
        raise ValueError(
            f"encoder has {len(enc_cfg.block_layer_counts)} stages but {decoder_blocks} decoder blocks requested"
        )
    size = enc_cfg.input_size
    if size % (2 ** decoder_blocks):
        raise ValueError(f"input_size {size} is not divisible by 2^{decoder_blocks} = {2 ** decoder_blocks}")
    return SegNet(enc_cfg, decoder_blocks, q, dropout_rate, seed)


def build_segnet_from_config(cfg: dict) -> SegNet:
    """Inverse of ``SegNet.config``."""
    return build_segnet(
        DenseEncoderConfig(**cfg["encoder"]),
        decoder_blocks=int(cfg["decoder_blocks"]),
        q=int(cfg["q"]),
        dropout_rate=float(cfg["dropout_rate"]),
        seed=int(cfg["seed"]),
    )


def _block_seed(seed: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, j]).generate_state(1)[0])


def forward(net: SegNet, images: Tensor, training: bool = False, seed: int = 0) -> Tensor:
    if not isinstance(images, Tensor):
        images = Tensor(images)
    s = net.input_size
    if images.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != (s, s):
        raise ValueError(f"forward: expected images of shape (N, 1, {s}, {s}), got {images.shape}")
    x = tanh(net.stem((images - 0.5) * 2.0))
    skips = []
    for block, trans in net.stages:
        x = block(x)
        skips.append(x)
        x = trans(x)
    for j, blk in enumerate(net.decoder):
        x = concat_channels(upsample2x(x), skips[net.decoder_blocks - 1 - j])
        x = blk(x, training=training, seed=_block_seed(seed, j))
    return net.head(x)


# -- loss ---------------------------------------------------------------------------


def one_hot(target: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise ValueError(f"target classes must lie in 0..{num_classes - 1}")
    oh = np.zeros((target.shape[0], num_classes) + target.shape[1:])
    np.put_along_axis(oh, target[:, None].astype(np.int64), 1.0, axis=1)
    return oh


def loss(
    logits: Tensor,
    target: np.ndarray,
    ce_weight: float = 1.0,
    dice_weight: float = 1.0,
    smooth: float = 1.0,
) -> Tensor:
    """Weighted pixel cross-entropy plus soft multi-class Dice loss.

    The Dice term is ``1 - mean_c softDSC_c`` over foreground classes, each
    class pooled over the whole batch with additive smoothing ``smooth``.
    """
    target = np.asarray(target)
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"loss: logits {logits.shape} and target {target.shape} disagree")
    oh = one_hot(target, logits.shape[1])
    total = None
    if ce_weight:
        npix = target.size
        ce = (log_softmax(logits, axis=1) * Tensor(oh)).sum() * (-1.0 / npix)
        total = ce * ce_weight
    if dice_weight:
        probs = softmax(logits, axis=1)
        axes = (0, 2, 3)
        inter = (probs * Tensor(oh)).sum(axis=axes)
        psum = probs.sum(axis=axes)
        gsum = oh.sum(axis=axes)
        dsc = (inter * 2.0 + smooth) / (psum + (gsum + smooth))
        fg = np.zeros(logits.shape[1])
        fg[1:] = 1.0 / (logits.shape[1] - 1)
        dice = 1.0 - (dsc * Tensor(fg)).sum()
        total = dice * dice_weight if total is None else total + dice * dice_weight
    return total


# -- optimisation -----------------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s[0] for s in samples])[:, None].astype(np.float64)
    masks = np.stack([s[1] for s in samples]).astype(np.int64)
    return images, masks


def predict_logits(net: SegNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward(net, Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out)


def argmax_mask(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lower class."""
    return np.argmax(logits, axis=-3).astype(np.uint8)


def predict_mask(net: SegNet, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return argmax_mask(predict_logits(net, image[None])[0])


def predict_masks(net: SegNet, images: Sequence[np.ndarray], batch_size: int = 8) -> np.ndarray:
    return argmax_mask(predict_logits(net, np.stack(images), batch_size))


def train(
    net: SegNet,
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    val: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    on_epoch=None,
) -> list[dict]:
    """Adam training; returns one ``{epoch, loss, val_dsc}`` row per epoch.

    ``val_dsc`` is the mean foreground DSC on ``val`` (NaN without one).
    """
    from .metrics import slice_report
    from .preprocess import augment_pair, random_affine

    if len(dataset) == 0:
        raise ValueError("train: dataset is empty")
    ce_w, dice_w = cfg.loss_weights
    opt = Adam(net.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    log_rows: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augmentation:
                batch = [augment_pair(img, m, random_affine(rng)) for img, m in batch]
            images, masks = _stack(batch)
            opt.zero_grad()
            logits = forward(net, Tensor(images), training=True, seed=_block_seed(cfg.seed, 1000 + step))
            value = loss(logits, masks, ce_w, dice_w)
            lv = value.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(f"loss became {lv} at epoch {epoch} step {step} (lr={cfg.learning_rate})")
            backward(value)
            opt.step()
            total += lv * len(batch)
            count += len(batch)
            step += 1
        val_dsc = float("nan")
        if val:
            preds = predict_masks(net, [v[0] for v in val])
            val_dsc = slice_report(preds, [v[1] for v in val]).mean["dsc"]
        row = {"epoch": epoch, "loss": total / count, "val_dsc": val_dsc}
        logger.info("epoch %d loss %.5f val_dsc %.4f", epoch, row["loss"], val_dsc)
        log_rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return log_rows
