import time

import numpy as np

import cdeboost as cb
from cdeboost import metrics, simdata

t0 = time.time()
imps, gofs, modes = [], [], []
for seed in range(10):
    Xtr, ytr = simdata.generate(simdata.SimSpec(kind="lggmd", n=1000, seed=100 + seed))
    Xva, yva = simdata.generate(simdata.SimSpec(kind="lggmd", n=1000, seed=1100 + seed))
    spec_te = simdata.SimSpec(kind="lggmd", n=1000, seed=2100 + seed)
    Xte, yte = simdata.generate(spec_te)
    cfg = cb.BoostConfig(n_trees=2000, eta=0.01, validation_fraction=0.0, early_stop_patience=300)
    model = cb.fit(Xtr, ytr, cfg, X_val=Xva, y_val=yva)
    ll, _, _ = metrics.loglik(model, Xte, yte)
    null = metrics.gaussian_null_loglik(ytr, yte)
    oracle = simdata.oracle_loglik(spec_te, Xte, yte)
    gofs.append(metrics.goodness_of_fit(ll, null, oracle))
    imps.append(cb.importance(model.trees[: model.selected_trees]))
    x = np.zeros(20)
    x[1] = -0.6
    g, dens = model.predict_density(x[None, :], n_bins=50)
    d = dens[0]
    peaks = [i for i in range(1, 49) if d[i] > d[i - 1] and d[i] > d[i + 1]]
    modes.append(len(peaks))
    print(
        f"seed {seed}: GoF={gofs[-1]:.3f} T*={model.selected_trees} modes={modes[-1]}",
        flush=True,
    )

mean_imp = np.mean(imps, axis=0)
print("GoF >= 0.45:", sum(g >= 0.45 for g in gofs), "/10")
print("bimodal (==2):", sum(m == 2 for m in modes), "/10")
print("mean importance:", np.round(mean_imp, 4))
print(
    "x1,x2,x3 vs max nuisance:",
    np.round(mean_imp[:3], 4),
    round(float(mean_imp[3:].max()), 4),
    all(mean_imp[i] > mean_imp[3:].max() for i in range(3)),
)
per_run = [all(im[i] > im[3:].max() for i in range(3)) for im in imps]
print("per-run ordering holds:", sum(per_run), "/10")
print(f"{time.time()-t0:.0f}s total")
