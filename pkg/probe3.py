import sys, time
import numpy as np
sys.path.insert(0, "src")
from flowdistill import data as dat, quantize as qz, sampler as smp, trainer as tr
from flowdistill.model import JointModel, ModelConfig
import flowdistill.autodiff as ad

noise = float(sys.argv[1]); lr = float(sys.argv[2]); steps = int(sys.argv[3]); crop = int(sys.argv[4])
zero_out = len(sys.argv) > 5 and sys.argv[5] == "zero"
t0 = time.time()
corpus = dat.generate_corpus(dat.CorpusParams(n_utterances=8, noise_scale=noise), np.random.default_rng([5, 0]))
corpus_n, stats = dat.normalize(corpus)
mcfg = ModelConfig(teacher_ramp=(2*steps)//3)
model = JointModel.create(mcfg, np.random.default_rng([5, 1]))
if zero_out:
    model.params["dec.out.w"].data[:] = 0.0
model.norm_mean, model.norm_std = stats.mean, stats.std
tcfg = tr.TrainConfig(total_steps=steps, warmup_steps=100, peak_lr=lr, batch_size=8, crop_len=crop, seed=5)
state = tr.TrainerState.create(model, tcfg, rng=np.random.default_rng([5, 2]))
rows = []
for chunk in range(steps // 400):
    rows += tr.train(state, corpus_n, 400)
    r = rows[-1]
    print(f"step {r['step']:5d} enc {np.mean([x['loss_encoder'] for x in rows[-100:]]):.4f} dec {np.mean([x['loss_decoder'] for x in rows[-100:]]):.4f} t={time.time()-t0:.0f}s", flush=True)
enc_tail = np.mean([r["loss_encoder"] for r in rows[-50:]])
print("enc tail:", round(enc_tail, 4), "thresh:", round(0.8*np.log(32), 4))
solver = smp.SolverConfig(step_size=0.0625, guidance=1.0)
mses, var_total, corrs = [], [], []
for i, u in enumerate(corpus_n.utterances):
    with ad.no_grad():
        z = model.condition(model.student_layers(u.features)).data
    gen, rep = smp.generate(model, len(u), solver, np.random.default_rng([5, 3, i]), z_cond=z)
    mses.append(float(((gen - u.features) ** 2).mean()))
    var_total.append(float(u.features.var()))
    corrs.append(float(np.corrcoef(gen.ravel(), u.features.ravel())[0, 1]))
print("mean MSE:", round(np.mean(mses), 4), "thresh:", round(0.1*np.mean(var_total), 4), "corr:", round(np.mean(corrs), 3))
report = qz.layer_mi_report(model, corpus_n, k=32, rng=np.random.default_rng([5, 5]))
for row in report.rows:
    print(f"layer {row.layer:>5}: phone {row.mi_phone:.3f}  speaker {row.mi_speaker:.3f}")
print("total:", round(time.time()-t0))
