import numpy as np

from madapt.data import MultiModalBatch
from madapt.model import ModelConfig

TOY = ModelConfig.desk(
    token_vocab=10,
    embed_dim=3,
    d_q=4,
    d_v=3,
    n_regions=2,
    n_grid=2,
    d_region=3,
    att_hidden=3,
    d_grid=3,
    d_e=4,
    cls_hidden=3,
    disc_hidden=3,
    n_answers_source=3,
    n_answers_target=2,
)


def toy_batch(rng, cfg=TOY, n=3, n_answers=None, offset=0.0, max_len=4):
    """Random batch with variable-length questions (no empty ones)."""
    n_answers = n_answers or cfg.n_answers_source
    lengths = rng.integers(1, max_len + 1, size=n)
    tokens = np.zeros((n, int(lengths.max())), dtype=np.int64)
    for i, L in enumerate(lengths):
        tokens[i, :L] = rng.integers(1, cfg.token_vocab, size=L)
    return MultiModalBatch(
        rng.normal(size=(n, cfg.n_regions, cfg.d_v)) + offset,
        rng.normal(size=(n, cfg.n_grid, cfg.d_v)) + offset,
        tokens,
        rng.integers(0, n_answers, size=n),
        [("a",) * 10] * n,
        ["other"] * n,
    )


def easy_task(n=240, seed=0):
    """A small, nearly noise-free two-domain task and a model config sized for it."""
    from madapt.data import ShiftConfig, WorldConfig, build_vocab, collate, generate_domain_pair

    world = WorldConfig(
        n_regions=2, n_grid=1, d_v=8, token_vocab=30, n_answers=4, concept_dim=4, junk_dim=2,
        region_noise=0.05, grid_noise=0.05, salience=3.0, keyword_prob=1.0, min_agreement=1.0,
    )
    src, tgt = generate_domain_pair(ShiftConfig(visual_shift=0.3), (n, n), seed=seed, world=world)
    vs, vt = build_vocab(src, 4), build_vocab(tgt, 4)
    cfg = ModelConfig.desk(
        token_vocab=30, embed_dim=8, d_q=16, d_v=8, n_regions=2, n_grid=1, d_region=8, att_hidden=8, d_grid=8,
        d_e=16, cls_hidden=16, disc_hidden=8, n_answers_source=len(vs), n_answers_target=len(vt),
    )
    return cfg, collate(src, vs), collate(tgt, vt), vs, vt
