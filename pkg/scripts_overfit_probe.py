"""Probe run for the joint-overfit acceptance thresholds (throwaway)."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from flowdistill import data as dat
from flowdistill import quantize as qz
from flowdistill import sampler as smp
from flowdistill import trainer as tr
from flowdistill.model import JointModel, ModelConfig

t0 = time.time()
corpus = dat.generate_corpus(
    dat.CorpusParams(n_utterances=8), np.random.default_rng([5, 0])
)
corpus_n, stats = dat.normalize(corpus)
mcfg = ModelConfig(teacher_ramp=1333)
model = JointModel.create(mcfg, np.random.default_rng([5, 1]))
model.norm_mean, model.norm_std = stats.mean, stats.std
tcfg = tr.TrainConfig(total_steps=2000, warmup_steps=100, peak_lr=2e-4, batch_size=8,
                      crop_len=100, seed=5)
state = tr.TrainerState.create(model, tcfg, rng=np.random.default_rng([5, 2]))
rows = []
for chunk in range(20):
    rows += tr.train(state, corpus_n, 100)
    r = rows[-1]
    print(f"step {r['step']:5d}  enc {np.mean([x['loss_encoder'] for x in rows[-100:]]):.4f} "
          f"dec {np.mean([x['loss_decoder'] for x in rows[-100:]]):.4f} "
          f"ppl {r['ppl_cb0']:.2f}/{r['ppl_cb1']:.2f}  t={time.time()-t0:.0f}s", flush=True)

print("ln(V) =", np.log(32), " 0.8*ln(V) =", 0.8 * np.log(32))
enc_tail = np.mean([r["loss_encoder"] for r in rows[-50:]])
print("final enc loss (50-step mean):", enc_tail, "single:", rows[-1]["loss_encoder"])

# resynthesis: condition on full z of each utterance, generate, compare MSE
solver = smp.SolverConfig(step_size=0.0625, guidance=1.0)
import flowdistill.autodiff as ad
mses, var_total = [], []
for i, u in enumerate(corpus_n.utterances):
    with ad.no_grad():
        layers = model.student_layers(u.features)
        z = model.condition(layers).data
    gen, rep = smp.generate(model, len(u), solver, np.random.default_rng([5, 3, i]), z_cond=z)
    mses.append(float(((gen - u.features) ** 2).mean()))
    var_total.append(float(u.features.var()))
print("resynthesis MSE per utt:", [round(m, 4) for m in mses])
print("data variance:", np.mean(var_total), "threshold 0.1*var:", 0.1 * np.mean(var_total))
print("mean MSE:", np.mean(mses))

# MI analysis vs raw features
report = qz.layer_mi_report(model, corpus_n, k=32, rng=np.random.default_rng([5, 5]))
for row in report.rows:
    print(f"layer {row.layer:>5}: phone {row.mi_phone:.3f}  speaker {row.mi_speaker:.3f}")
print("total time:", time.time() - t0)
