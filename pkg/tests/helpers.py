"""Shared configuration builders for the test modules."""

from brims.config import BrimsConfig


def small(variant="BRIMS", **kw):
    base = dict(variant=variant, n_modules=[3, 2], n_active=[2, 1], d_module=[4, 4], d_att=4, d_v=4, input_dim=2,
                embed_dim=4, output_dim=3, head_hidden=4, dropout=0.0)
    if variant in ("LSTM", "RIMS"):
        base.update(n_modules=[3], n_active=[2], d_module=[4])
    if variant.startswith("LSTM"):
        base["n_modules"] = [1] * len(base["n_modules"])
        base["n_active"] = [1] * len(base["n_active"])
    if variant == "MLD_RIMS":
        base.update(n_modules=[3, 3], n_active=[2, 2])
    base.update(kw)
    return BrimsConfig(**base)


def rand_cfg(rng, variant):
    if variant in ("RIMS", "LSTM"):
        L = 1
    elif variant == "BRIMS":
        L = int(rng.integers(1, 4))
    else:
        L = int(rng.integers(2, 4))
    if variant.startswith("LSTM"):
        n, m = [1] * L, [1] * L
    elif variant == "MLD_RIMS":
        nn = int(rng.integers(1, 4))
        n, m = [nn] * L, [int(rng.integers(1, nn + 1))] * L
    else:
        n = [int(rng.integers(1, 4)) for _ in range(L)]
        m = [int(rng.integers(1, k + 1)) for k in n]
    lstm_family = variant.startswith("LSTM")
    return BrimsConfig(
        variant=variant, n_modules=n, n_active=m, d_module=[2 * int(rng.integers(1, 4)) for _ in range(L)],
        d_att=2 * int(rng.integers(1, 3)), d_v=2 * int(rng.integers(1, 3)), input_dim=int(rng.integers(1, 3)),
        embed_dim=2 * int(rng.integers(2, 5)), output_dim=3, head_hidden=4, dropout=0.0,
        num_heads=int(rng.choice([1, 2])),
        per_module_keys=bool(rng.integers(0, 2)) and variant not in ("LSTM", "LSTM_H", "LSTM_HB"),
        cell=None if lstm_family else str(rng.choice(["gru", "lstm"])))
