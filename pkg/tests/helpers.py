"""Independent oracles shared by the unit and acceptance suites."""
import numpy as np

from slidecap.encoders import EncoderConfig, init_params
from slidecap.longcap import LongTextConfig
from slidecap.textpipe import TokenSequence, vocabulary_from_tokens
from slidecap.training import batch_loss, compute_gradients


def full_sort_recall(values, k):
    """Recall@k by fully sorting each row (descending value, then ascending index)."""
    values = np.asarray(values)
    n = values.shape[0]
    hits = 0
    for i in range(n):
        order = sorted(range(n), key=lambda j: (-values[i, j], j))
        hits += i in order[:k]
    return hits / n


def is_structurally_zero(name, index, params):
    """Key-projection biases cannot change attention (softmax shift invariance)."""
    if not name.endswith("attn.b_qkv"):
        return False
    width = params[name].shape[0] // 3
    return width <= index[0] < 2 * width


def toy_gradient_problem(seed=0, pool_kernel=1, normalize_before_mean=False):
    """Width-8 towers, batch of 4 captions of which three need several windows."""
    vocab = vocabulary_from_tokens([f"w{i}" for i in range(20)])
    cfg = EncoderConfig(vocab_size=len(vocab), context_len=8, text_layers=2, text_heads=2, text_width=8,
                        image_size=8, patch_size=4, image_layers=1, image_heads=2, image_width=8,
                        embed_dim=6, pool_kernel=pool_kernel)
    ltc = LongTextConfig(context_len=8, stride=3, normalize_before_mean=normalize_before_mean)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    # move away from the near-symmetric initialization so gradients are well scaled
    for name in params:
        params[name] = params[name] + rng.normal(0, 0.3, size=params[name].shape)
    params["log_temperature"] = np.asarray(1.0)
    captions = [TokenSequence(tuple(int(x) for x in rng.integers(0, 20, size=n)), vocab)
                for n in (3, 9, 14, 20)]
    images = rng.random((4, 8, 8, 3))
    return params, images, captions, cfg, ltc


def finite_difference_check(params, images, captions, cfg, ltc, n_coords=100, step=1e-4, seed=0):
    """Relative errors of analytic vs central-difference gradients at random coordinates."""
    _, grads = compute_gradients(params, images, captions, cfg, ltc)
    rng = np.random.default_rng(seed)
    names = params.names()
    sizes = np.array([params[n].size for n in names], dtype=float)
    errors = []
    while len(errors) < n_coords:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[name]
        index = tuple(int(rng.integers(0, s)) for s in p.shape)
        if is_structurally_zero(name, index, params):
            continue
        old = p[index]
        p[index] = old + step
        up = batch_loss(params, images, captions, cfg, ltc)
        p[index] = old - step
        down = batch_loss(params, images, captions, cfg, ltc)
        p[index] = old
        numeric = (up - down) / (2 * step)
        analytic = float(grads[name][index])
        scale = max(abs(analytic), abs(numeric))
        rel = abs(analytic - numeric) / scale if scale > 0 else 0.0
        errors.append((name, index, analytic, numeric, rel))
    return errors
