"""Small synthetic datasets shared by the training, decoding and acceptance tests."""
import itertools

import numpy as np

from oracles import central_differences, max_relative_error
from uniseq.model import ModelConfig, SourceItem, preset
from uniseq.numerics import Tensor, backward, gelu, layer_norm, matmul, softmax_rows, tsum
from uniseq.tasks import Episode, Limits, RenderedPair, make_mlm, serialize
from uniseq.tokenization import BOS, EOS, assemble, train_bpe
from uniseq.vision import Image

MICRO = ModelConfig(encoder_layers=1, decoder_layers=1, d_model=8, heads=2, d_ffn=12,
                    max_src=12, max_tgt=8, num_text=10, num_locations=2, num_vision=3,
                    patch_size=2, channels=1, embed_hidden=2)


def random_pairs(rng, cfg=MICRO, n=8):
    """Random mixed text/patch sources and random targets, lengths varying per pair."""
    pairs = []
    for _ in range(n):
        items = [SourceItem.text(int(t)) for t in rng.integers(5, cfg.num_text, size=rng.integers(1, 5))]
        for r in range(int(rng.integers(0, 3))):
            items.append(SourceItem.image_patch(rng.uniform(-1, 1, cfg.patch_dim), r))
        if rng.uniform() < 0.3:
            items.append(SourceItem.masked_patch(5))
        body = [int(t) for t in rng.integers(5, cfg.vocab_size, size=rng.integers(1, cfg.max_tgt - 1))]
        pairs.append(RenderedPair(items, [BOS] + body + [EOS]))
    return pairs


def quadrant_episodes():
    """32 distinct captioning episodes: four quadrants each lit or dark, in black/white or grey contrast."""
    eps = []
    for bits in itertools.product(range(2), repeat=4):
        for grey in range(2):
            low, high = (0.3, 0.7) if grey else (0.0, 1.0)
            px = np.full((16, 16), low)
            for q, on in enumerate(bits):
                r, c = divmod(q, 2)
                if on:
                    px[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8] = high
            caption = ("grey " if grey else "black ") + " ".join("lit" if on else "dark" for on in bits)
            eps.append(Episode("captioning", images=[Image.from_unit(px)], target=caption))
    return eps


def quadrant_setup():
    """Episodes, vocabulary, tiny config and rendered pairs for the overfit task."""
    eps = quadrant_episodes()
    vocab = assemble(train_bpe([e.target for e in eps] + ["What does the image describe?"], 40), 16, 32)
    cfg = preset("tiny", max_src=32, max_tgt=16).with_vocab(vocab)
    pairs = [serialize(e, vocab, Limits.for_config(cfg)) for e in eps]
    return eps, vocab, cfg, pairs


def random_graph(rng):
    """A random expression mixing the differentiable primitives; returns (leaves, build)."""
    depth = int(rng.integers(1, 7))
    rows = int(rng.integers(1, 5))
    width = int(rng.integers(3, 9))
    plan = []
    shapes = [(rows, width)]
    cur = width
    for _ in range(depth):
        kind = rng.choice(["matmul", "add", "mul", "softmax", "layer_norm", "gelu"])
        if kind == "matmul":
            nxt = int(rng.integers(3, 9))
            plan.append(("matmul", len(shapes)))
            shapes.append((cur, nxt))
            cur = nxt
        elif kind in ("add", "mul"):
            plan.append((kind, len(shapes)))
            shapes.append((rows, cur))
        elif kind == "layer_norm":
            plan.append(("layer_norm", len(shapes)))
            shapes.append((cur,))
            shapes.append((cur,))
        else:
            plan.append((kind, None))
    shapes.append((rows, cur))  # readout weights
    arrays = [rng.normal(size=s) for s in shapes]

    def build(vals):
        x = vals[0]
        for kind, idx in plan:
            if kind == "matmul":
                x = matmul(x, vals[idx])
            elif kind == "add":
                x = x + vals[idx]
            elif kind == "mul":
                x = x * vals[idx]
            elif kind == "layer_norm":
                x = layer_norm(x, vals[idx], vals[idx + 1])
            elif kind == "softmax":
                x = softmax_rows(x)
            else:
                x = gelu(x)
        return tsum(x * vals[-1])

    return arrays, build


def gradient_check_random_graph(seed):
    rng = np.random.default_rng(seed)
    arrays, build = random_graph(rng)
    params = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = backward(build(params), params)
    numeric = central_differences(lambda: build([Tensor(p.data) for p in params]).item(),
                                  [p.data for p in params])
    return max_relative_error(analytic, numeric)


# -- long-context classification with the evidence past the 50-token cap ------

NEEDLE_CLASSES = {"home": "discharged", "ward": "transferred", "morgue": "deceased", "clinic": "readmitted"}
_FILLER = ("the patient was admitted overnight and remained stable with routine observations "
           "recorded every hour by the nursing staff on duty").split()
NEEDLE_HEAD = " ".join(_FILLER + _FILLER[:6])
_TAIL = "notes vitals labs reviewed plan unchanged daily".split()


def needle_episode(rng, trigger, repeats=4):
    """Fixed filler head, then the class trigger (repeated) and a little random tail."""
    tail = [trigger] * repeats + list(rng.choice(_TAIL, size=int(rng.integers(1, 4))))
    return Episode("mortality", text={"Text": f"{NEEDLE_HEAD} {' '.join(tail)}"},
                   target=NEEDLE_CLASSES[trigger], answer_set=sorted(NEEDLE_CLASSES.values()))


def needle_setup(n_train=64, n_test=40, seed=0):
    """Balanced train/test splits, a word-level BPE and a tiny config for the truncation study."""
    rng = np.random.default_rng(seed)
    keys = list(NEEDLE_CLASSES)
    train_eps = [needle_episode(rng, keys[i % 4]) for i in range(n_train)]
    test_eps = [needle_episode(rng, keys[i % 4]) for i in range(n_test)]
    corpus = ([e.text["Text"] for e in train_eps] + list(NEEDLE_CLASSES.values()) * 8
              + ["What is the predicted outcome for the patient before discharge:"])
    vocab = assemble(train_bpe(corpus * 3, 400), 4, 4)
    cfg = preset("tiny", max_src=96, max_tgt=8).with_vocab(vocab)
    return train_eps, test_eps, vocab, cfg


# -- transfer: masked-word pretraining, then full-sentence reconstruction ----------

_COLOURS = "red blue green small large round square soft hard bright dark warm".split()


def transfer_setup(seed=0):
    """Pretraining pairs (word masking) and fine-tuning pairs drawn from one sentence distribution."""
    rng = np.random.default_rng(seed)
    sents = [" ".join(rng.choice(_COLOURS, size=5)) for _ in range(128)]
    vocab = assemble(train_bpe(sents + ["What is the complete text of", "What is the summary of the text"], 200), 4, 4)
    cfg = preset("tiny", max_src=32, max_tgt=12).with_vocab(vocab)
    lim = Limits.for_config(cfg)
    pretrain = [serialize(make_mlm(s, 0.3, i), vocab, lim) for i, s in enumerate(sents[:64])]
    finetune = [serialize(Episode("summarization", text={"Text": s}, target=s), vocab, lim) for s in sents[64:]]
    return pretrain, finetune, cfg
