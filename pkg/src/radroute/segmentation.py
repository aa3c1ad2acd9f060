"""U-Net route segmenter and the two-stage curriculum.

Stage 1 trains on small augmented crops centered on labeled pixels with a
masked loss. A rotation-ensemble pass then propagates labels to unlabeled
regions, and stage 2 fine-tunes on full scans with the densified masks.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import numeric
from .canvas import Label
from .errors import NumericError, SamplingError, ShapeError


def prepare_scan_image(power_image: np.ndarray) -> np.ndarray:
    """Network input: log-compressed, per-scan standardized radar power."""
    x = np.log1p(np.maximum(power_image, 0.0))
    std = x.std()
    if std < 1e-12:
        return np.zeros_like(x)
    return (x - x.mean()) / std


class UNet:
    """Encoder/decoder with skip connections and a 1-channel sigmoid head.

    depth D downsampling stages, base_channels C doubling per stage. The
    head conv is zero-initialized by default so an untrained model outputs
    probability 0.5 everywhere.
    """

    def __init__(self, depth: int = 3, base_channels: int = 8,
                 in_channels: int = 1, seed: int = 0, zero_head: bool = True):
        self.depth = depth
        self.base_channels = base_channels
        self.in_channels = in_channels
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0E7]))
        conv = numeric.Conv2d
        self.enc = []
        c_in = in_channels
        for d in range(depth):
            c = base_channels * (2 ** d)
            self.enc.append([conv(c_in, c, 3, padding=1, rng=rng),
                             numeric.ReLU(),
                             conv(c, c, 3, padding=1, rng=rng),
                             numeric.ReLU()])
            c_in = c
        self.pools = [numeric.MaxPool2d(2) for _ in range(depth)]
        c_mid = base_channels * (2 ** depth)
        self.bottleneck = [conv(c_in, c_mid, 3, padding=1, rng=rng),
                           numeric.ReLU(),
                           conv(c_mid, c_mid, 3, padding=1, rng=rng),
                           numeric.ReLU()]
        self.ups = [numeric.Upsample2x() for _ in range(depth)]
        self.dec = []
        c_up = c_mid
        for d in reversed(range(depth)):
            c_skip = base_channels * (2 ** d)
            self.dec.append([conv(c_up + c_skip, c_skip, 3, padding=1,
                                  rng=rng),
                             numeric.ReLU(),
                             conv(c_skip, c_skip, 3, padding=1, rng=rng),
                             numeric.ReLU()])
            c_up = c_skip
        self.head = conv(base_channels, 1, 1, zero_init=zero_head, rng=rng)
        self.sigmoid = numeric.Sigmoid()
        self._skip_channels = None

    def _blocks(self):
        for block in self.enc:
            yield from block
        yield from self.bottleneck
        for block in self.dec:
            yield from block
        yield self.head

    @property
    def params(self):
        return [p for layer in self._blocks() for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self._blocks() for g in layer.grads]

    def zero_grad(self):
        for layer in self._blocks():
            layer.zero_grad()
        for pool in self.pools:
            pool.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError("U-Net input must be (N, C, H, W)")
        if x.shape[2] % (2 ** self.depth) or x.shape[3] % (2 ** self.depth):
            raise ShapeError(
                f"spatial size must be divisible by {2 ** self.depth}")
        skips = []
        for block, pool in zip(self.enc, self.pools):
            for layer in block:
                x = layer.forward(x)
            skips.append(x)
            x = pool.forward(x)
        for layer in self.bottleneck:
            x = layer.forward(x)
        self._skip_channels = []
        for up, block, skip in zip(self.ups, self.dec, reversed(skips)):
            x = up.forward(x)
            self._skip_channels.append(skip.shape[1])
            x = numeric.concat_channels(skip, x)
            for layer in block:
                x = layer.forward(x)
        x = self.head.forward(x)
        return self.sigmoid.forward(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad = self.sigmoid.backward(grad)
        grad = self.head.backward(grad)
        skip_grads = []
        for block, up, c_skip in zip(reversed(self.dec), reversed(self.ups),
                                     reversed(self._skip_channels)):
            for layer in reversed(block):
                grad = layer.backward(grad)
            g_skip, g_up = numeric.split_channels(grad, c_skip)
            skip_grads.append(g_skip)
            grad = up.backward(g_up)
        for layer in reversed(self.bottleneck):
            grad = layer.backward(grad)
        for block, pool, g_skip in zip(reversed(self.enc),
                                       reversed(self.pools),
                                       reversed(skip_grads)):
            grad = pool.backward(grad) + g_skip
            for layer in reversed(block):
                grad = layer.backward(grad)
        return grad

    def named_params(self):
        out = []
        for i, layer in enumerate(self._blocks()):
            for j, p in enumerate(layer.params):
                out.append((f"layer{i}.p{j}", p))
        return out

    def cast(self, dtype):
        """In-place parameter cast (float32 inference, float64 training)."""
        for layer in self._blocks():
            for i, p in enumerate(layer.params):
                layer.params[i] = p.astype(dtype)
            if isinstance(layer, numeric.Conv2d):
                layer.weight, layer.bias = layer.params
        return self


def save_unet(weights_path, header_path, model: UNet, thresholds=None):
    import json

    numeric.save_weights(weights_path, model.named_params())
    header = {"depth": model.depth, "base_channels": model.base_channels,
              "in_channels": model.in_channels,
              "thresholds": thresholds or {"probability": 0.5}}
    with open(header_path, "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")


def load_unet(weights_path, header_path) -> UNet:
    import json

    with open(header_path) as f:
        header = json.load(f)
    model = UNet(depth=header["depth"], base_channels=header["base_channels"],
                 in_channels=header["in_channels"])
    loaded = dict(numeric.load_weights(weights_path))
    for name, p in model.named_params():
        p[...] = loaded[name]
    return model


@dataclass
class CropSample:
    image: np.ndarray  # (crop, crop) float
    mask: np.ndarray  # (crop, crop) uint8 Label values


@dataclass
class AugmentationConfig:
    flip: bool = True
    rotation_degrees: tuple = (-180.0, 180.0)
    elastic_grid: int = 16  # px spacing of the coarse displacement grid
    elastic_sigma: float = 1.5  # px displacement magnitude
    rescale_range: tuple = (0.8, 1.25)
    enabled: bool = True

    def __post_init__(self):
        if self.rescale_range[0] <= 0:
            raise ValueError("rescale factors must be positive")
        if self.elastic_sigma < 0:
            raise ValueError("elastic magnitude must be non-negative")


class ResampleNeeded(Exception):
    """Transform pushed every label out of frame; caller should retry."""


def _displacement_field(shape, grid: int, sigma: float,
                        rng: np.random.Generator):
    h, w = shape
    gh, gw = max(h // grid, 2), max(w // grid, 2)
    coarse = rng.normal(0.0, sigma, size=(2, gh, gw))
    zoom = (h / gh, w / gw)
    field = np.stack([ndimage.zoom(coarse[i], zoom, order=1)
                      for i in range(2)])
    return ndimage.gaussian_filter(field, sigma=(0, 2.0, 2.0))[:, :h, :w]


def augment(sample: CropSample, cfg: AugmentationConfig,
            rng: np.random.Generator) -> CropSample:
    """Identical geometric transform on image and mask.

    Image is bilinearly interpolated; the mask uses nearest-label lookup so
    unlabeled stays unlabeled. Raises ResampleNeeded if no labeled pixel
    survives.
    """
    image, mask = sample.image, sample.mask
    if not cfg.enabled:
        return CropSample(image=image.copy(), mask=mask.copy())
    if cfg.flip and rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if cfg.flip and rng.random() < 0.5:
        image, mask = image[::-1, :], mask[::-1, :]
    angle = np.deg2rad(rng.uniform(*cfg.rotation_degrees))
    scale = rng.uniform(*cfg.rescale_range)
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: rotate by -angle, scale by 1/s about the center
    dy, dx = rows - cy, cols - cx
    c, s = np.cos(angle), np.sin(angle)
    src_r = (c * dy - s * dx) / scale + cy
    src_c = (s * dy + c * dx) / scale + cx
    if cfg.elastic_sigma > 0:
        disp = _displacement_field((h, w), cfg.elastic_grid,
                                   cfg.elastic_sigma, rng)
        src_r = src_r + disp[0]
        src_c = src_c + disp[1]
    coords = np.stack([src_r, src_c])
    out_image = ndimage.map_coordinates(image, coords, order=1, mode="constant",
                                        cval=0.0)
    out_mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant",
                                       cval=int(Label.UNLABELED))
    if not np.any(out_mask != int(Label.UNLABELED)):
        raise ResampleNeeded()
    return CropSample(image=out_image, mask=out_mask.astype(np.uint8))


def sample_crops(scan_image: np.ndarray, mask: np.ndarray, n: int,
                 crop: int = 64, seed: int = 0) -> list:
    """Crops centered on uniformly drawn labeled pixels, clamped to bounds."""
    labeled_rows, labeled_cols = np.nonzero(mask != int(Label.UNLABELED))
    if len(labeled_rows) == 0:
        raise SamplingError("mask has no labeled pixels")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC809]))
    h, w = scan_image.shape
    out = []
    for _ in range(n):
        k = rng.integers(len(labeled_rows))
        r = int(np.clip(labeled_rows[k] - crop // 2, 0, h - crop))
        c = int(np.clip(labeled_cols[k] - crop // 2, 0, w - crop))
        out.append(CropSample(image=scan_image[r:r + crop, c:c + crop].copy(),
                              mask=mask[r:r + crop, c:c + crop].copy()))
    return out


@dataclass
class SegTrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 8
    steps: int = 400
    seed: int = 0


@dataclass
class SegTrainLog:
    losses: list = field(default_factory=list)
    skipped_batches: int = 0


def _mask_to_target(mask: np.ndarray):
    """(labeled bool, path-target float) arrays for the masked BCE loss."""
    labeled = mask != int(Label.UNLABELED)
    target = (mask == int(Label.PATH)).astype(np.float64)
    return labeled, target


def _train_batches(model: UNet, batches, lr: float, log: SegTrainLog):
    for images, labeled, targets in batches:
        if not labeled.any():
            log.skipped_batches += 1
            continue
        probs = model.forward(images)
        loss, grad = numeric.masked_binary_cross_entropy(probs, targets,
                                                         labeled)
        if not np.isfinite(loss):
            raise NumericError("training diverged (non-finite loss)")
        model.zero_grad()
        model.backward(grad)
        numeric.sgd_step(model.params, model.grads, lr)
        log.losses.append(loss)


def stage1_train(scan_images: list, masks: list,
                 model: UNet | None = None,
                 cfg: SegTrainConfig | None = None,
                 aug_cfg: AugmentationConfig | None = None,
                 crop: int = 64, crops_per_scan: int = 200):
    """Curriculum stage 1: masked BCE on augmented crops around labels."""
    cfg = cfg or SegTrainConfig()
    aug_cfg = aug_cfg or AugmentationConfig()
    if model is None:
        model = UNet(seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x57A6]))
    pool = []
    for i, (img, msk) in enumerate(zip(scan_images, masks)):
        try:
            pool.extend(sample_crops(img, msk, crops_per_scan, crop,
                                     seed=cfg.seed * 9973 + i))
        except SamplingError:
            continue
    if not pool:
        raise SamplingError("no labeled scans to train on")
    log = SegTrainLog()

    def batches():
        for _ in range(cfg.steps):
            idx = rng.integers(len(pool), size=cfg.batch_size)
            ims, labs, tgts = [], [], []
            for k in idx:
                sample = pool[k]
                for _attempt in range(10):
                    try:
                        sample = augment(pool[k], aug_cfg, rng)
                        break
                    except ResampleNeeded:
                        continue
                labeled, target = _mask_to_target(sample.mask)
                ims.append(sample.image)
                labs.append(labeled)
                tgts.append(target)
            yield (np.stack(ims)[:, None], np.stack(labs)[:, None],
                   np.stack(tgts)[:, None])

    _train_batches(model, batches(), cfg.learning_rate, log)
    return model, log


@dataclass
class PropagationConfig:
    tile_size: int = 64
    n_rotations: int = 5
    vote_threshold: float = 0.6
    probability_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_rotations < 1:
            raise ValueError("need at least one rotation")
        if not (0 < self.vote_threshold <= 1):
            raise ValueError("vote_threshold in (0, 1]")
        if not (0 < self.probability_threshold < 1):
            raise ValueError("probability_threshold in (0, 1)")


def _tiled_inference(model, image: np.ndarray, tile: int) -> np.ndarray:
    """Segment an image tile by tile (no overlap) and reassemble."""
    h, w = image.shape
    ph = (tile - h % tile) % tile
    pw = (tile - w % tile) % tile
    padded = np.pad(image, ((0, ph), (0, pw)))
    tiles = []
    positions = []
    for r in range(0, padded.shape[0], tile):
        for c in range(0, padded.shape[1], tile):
            tiles.append(padded[r:r + tile, c:c + tile])
            positions.append((r, c))
    probs = model.forward(np.stack(tiles)[:, None])[:, 0]
    out = np.zeros_like(padded)
    for (r, c), p in zip(positions, probs):
        out[r:r + tile, c:c + tile] = p
    return out[:h, :w]


def _rotate_image(image: np.ndarray, angle_deg: float, order: int,
                  cval: float = 0.0) -> np.ndarray:
    if angle_deg == 0.0:
        return image.copy()
    return ndimage.rotate(image, angle_deg, reshape=False, order=order,
                          mode="constant", cval=cval, prefilter=False)


def propagate_labels(model: UNet, scan_image: np.ndarray,
                     original_mask: np.ndarray, cfg: PropagationConfig,
                     valid_region: np.ndarray | None = None,
                     angles: list | None = None) -> np.ndarray:
    """Rotation-ensemble label propagation.

    For each random global rotation, the rotated scan is tiled, segmented,
    and the prediction is de-rotated. A pixel is voted PATH when at least
    vote_threshold of its valid rotations exceed probability_threshold,
    NOT_PATH otherwise; original labels take precedence; pixels outside
    valid_region (e.g. beyond radar range) stay unlabeled. An explicit
    angle list (degrees) overrides the cfg-seeded random rotations.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9069]))
    if not isinstance(model, UNetInference):
        model = UNetInference(model)
    if angles is not None:
        angles = list(angles)
    elif cfg.n_rotations == 1:
        angles = [0.0]
    else:
        angles = list(rng.uniform(0.0, 360.0, size=cfg.n_rotations))
    h, w = scan_image.shape
    path_votes = np.zeros((h, w), dtype=np.int64)
    valid_votes = np.zeros((h, w), dtype=np.int64)
    ones = np.ones((h, w))
    for angle in angles:
        img_r = _rotate_image(scan_image, angle, order=1)
        valid_r = _rotate_image(ones, angle, order=0)
        prob_r = _tiled_inference(model, img_r, cfg.tile_size)
        prob = _rotate_image(prob_r, -angle, order=1)
        valid = _rotate_image(valid_r, -angle, order=0) > 0.5
        path_votes += ((prob > cfg.probability_threshold) & valid)
        valid_votes += valid
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(valid_votes > 0, path_votes / np.maximum(valid_votes,
                                                                 1), 0.0)
    propagated = np.where(frac >= cfg.vote_threshold, int(Label.PATH),
                          int(Label.NOT_PATH)).astype(np.uint8)
    propagated[valid_votes == 0] = int(Label.UNLABELED)
    if valid_region is not None:
        propagated[~valid_region] = int(Label.UNLABELED)
    out = np.where(original_mask != int(Label.UNLABELED), original_mask,
                   propagated).astype(np.uint8)
    return out


def stage2_finetune(model: UNet, scan_images: list, masks: list,
                    cfg: SegTrainConfig | None = None):
    """Curriculum stage 2: masked BCE on full scans with densified masks."""
    cfg = cfg or SegTrainConfig(steps=60, learning_rate=0.05)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF17E]))
    log = SegTrainLog()

    def batches():
        for _ in range(cfg.steps):
            k = int(rng.integers(len(scan_images)))
            labeled, target = _mask_to_target(masks[k])
            yield (scan_images[k][None, None], labeled[None, None],
                   target[None, None])

    _train_batches(model, batches(), cfg.learning_rate, log)
    return model, log


# Collapsing a 3x3 kernel over a 2x nearest-neighbour upsampled image onto
# the coarse grid: for each output-pixel parity the three kernel taps fold
# into two, because adjacent fine pixels share a coarse source pixel.
_UPSAMPLE_TAPS = (np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]),
                  np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))


def _pad1_nhwc(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    out[:, 1:h + 1, 1:w + 1] = x
    return out


def _conv3_nhwc(x: np.ndarray, wmat: np.ndarray,
                bias: np.ndarray) -> np.ndarray:
    """3x3 same-padding convolution, channel-last, via a strided-view GEMM."""
    xp = _pad1_nhwc(x)
    n, hp, wp, c = xp.shape
    h, w = hp - 2, wp - 2
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, h, w, 3, 3, c), (s0, s1, s2, s1, s2, s3))
    out = win.reshape(n * h * w, 9 * c) @ wmat
    out += bias
    return out.reshape(n, h, w, -1)


def _conv_mat(weight: np.ndarray) -> np.ndarray:
    """(O, C, k, k) kernel as a (k*k*C, O) float32 GEMM operand."""
    o = weight.shape[0]
    return np.ascontiguousarray(
        weight.transpose(2, 3, 1, 0).reshape(-1, o).astype(np.float32))


def _parity_mats(weight: np.ndarray) -> list:
    """Per-parity 2x2 kernels equivalent to 3x3 conv after 2x upsampling."""
    out = []
    for ta in _UPSAMPLE_TAPS:
        row = []
        for tb in _UPSAMPLE_TAPS:
            k2 = np.einsum("ru,sv,ocuv->rsco", ta, tb, weight)
            row.append(np.ascontiguousarray(
                k2.reshape(-1, weight.shape[0]).astype(np.float32)))
        out.append(row)
    return out


class UNetInference:
    """Single-threaded float32 forward pass precompiled from a U-Net.

    Two layout changes make this several times faster than the training
    forward: convolutions run channel-last so the patch matrix is a strided
    view feeding one GEMM per layer, and each decoder stage convolves the
    upsampled branch directly on the coarse grid (see _parity_mats), which
    also removes the channel concatenation copy.
    """

    def __init__(self, model: UNet):
        self.depth = model.depth

        def pair(block):
            return [(_conv_mat(block[0].weight),
                     block[0].bias.astype(np.float32)),
                    (_conv_mat(block[2].weight),
                     block[2].bias.astype(np.float32))]

        self.enc = [pair(block) for block in model.enc]
        self.bottleneck = pair(model.bottleneck)
        self.dec = []
        for block in model.dec:
            conv1, conv2 = block[0], block[2]
            c_skip = conv1.out_channels
            self.dec.append({
                "skip": (_conv_mat(conv1.weight[:, :c_skip]),
                         conv1.bias.astype(np.float32)),
                "up": _parity_mats(conv1.weight[:, c_skip:]),
                "conv2": (_conv_mat(conv2.weight),
                          conv2.bias.astype(np.float32)),
            })
        self.head = (np.ascontiguousarray(
            model.head.weight.reshape(1, -1).T.astype(np.float32)),
            model.head.bias.astype(np.float32))
        self._sigmoid = numeric.Sigmoid()

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(N, 1, H, W) in, (N, 1, H, W) sigmoid probabilities out."""
        if x.ndim != 4:
            raise ShapeError("U-Net input must be (N, C, H, W)")
        if x.shape[2] % (2 ** self.depth) or x.shape[3] % (2 ** self.depth):
            raise ShapeError(
                f"spatial size must be divisible by {2 ** self.depth}")
        xt = x.transpose(0, 2, 3, 1).astype(np.float32)
        skips = []
        for (m1, b1), (m2, b2) in self.enc:
            xt = _conv3_nhwc(xt, m1, b1)
            np.maximum(xt, 0.0, out=xt)
            xt = _conv3_nhwc(xt, m2, b2)
            np.maximum(xt, 0.0, out=xt)
            skips.append(xt)
            n, h, w, c = xt.shape
            xt = xt.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))
        for m, b in self.bottleneck:
            xt = _conv3_nhwc(xt, m, b)
            np.maximum(xt, 0.0, out=xt)
        for stage, skip in zip(self.dec, reversed(skips)):
            out = _conv3_nhwc(skip, *stage["skip"])
            zp = _pad1_nhwc(xt)
            n, hp, wp, c = zp.shape
            ch, cw = hp - 2, wp - 2
            s0, s1, s2, s3 = zp.strides
            for a in (0, 1):
                for b in (0, 1):
                    win = np.lib.stride_tricks.as_strided(
                        zp[:, a:a + ch + 1, b:b + cw + 1],
                        (n, ch, cw, 2, 2, c), (s0, s1, s2, s1, s2, s3))
                    out[:, a::2, b::2, :] += (
                        win.reshape(n * ch * cw, 4 * c) @ stage["up"][a][b]
                    ).reshape(n, ch, cw, -1)
            np.maximum(out, 0.0, out=out)
            xt = _conv3_nhwc(out, *stage["conv2"])
            np.maximum(xt, 0.0, out=xt)
        n, h, w, c = xt.shape
        logits = xt.reshape(n * h * w, c) @ self.head[0] + self.head[1]
        probs = self._sigmoid.forward(logits.reshape(n, h, w, 1))
        return probs.transpose(0, 3, 1, 2)

    def probabilities(self, scan_image: np.ndarray) -> np.ndarray:
        return self.forward(scan_image[None, None])[0, 0].astype(np.float64)


def segment_probabilities(model, scan_image: np.ndarray,
                          dtype=np.float64) -> np.ndarray:
    """Full-scan sigmoid probability map.

    Training stays in float64; pass dtype=np.float32 (or a prebuilt
    UNetInference) for fast inference.
    """
    if isinstance(model, UNetInference):
        return model.probabilities(scan_image)
    if dtype == np.float64:
        return model.forward(scan_image[None, None].astype(dtype))[0, 0]
    return UNetInference(model).probabilities(scan_image)


def cast_copy(model: UNet, dtype) -> UNet:
    clone = UNet(depth=model.depth, base_channels=model.base_channels,
                 in_channels=model.in_channels)
    for (_, dst), (_, src) in zip(clone.named_params(),
                                  model.named_params()):
        dst[...] = src
    return clone.cast(dtype)


def segment(model: UNet, scan_image: np.ndarray,
            threshold: float = 0.5) -> np.ndarray:
    """Binary path mask: probability strictly above the threshold."""
    probs = segment_probabilities(model, scan_image, dtype=np.float64)
    return (probs > threshold).astype(np.uint8)
