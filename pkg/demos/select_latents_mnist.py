"""Train a small mean-field VAE on an MNIST subset, rank its latent
dimensions by ELBD, drop the top 60% from the encoder and watch the test
-ELBO as the number of decoder samples K grows.

    python3 demos/select_latents_mnist.py
"""
import numpy as np

from elbd.data import load_mnist_subset, split
from elbd.mathcore import Rng
from elbd.models import build_model, eval_losses, train
from elbd.optimize import optimized_eval
from elbd.select import build_mask, elbd


def main():
    data = load_mnist_subset(2500)
    train_set, test_set = split(data, (4, 1), Rng(0).split("split"))
    rng = Rng(1)
    model = build_model("vae", "mean_field", train_set.dim_x, 16, rng.split("init"), hidden=(256, 256))
    curve = train(model, train_set, epochs=10, lr=1e-3, batch=100, rng=rng.split("train")).loss_curve
    print(f"training loss {curve[0]:.2f} -> {curve[-1]:.2f}")

    origin = eval_losses(model, test_set.images, rng=rng.split("eval"))
    print(f"origin   -ELBO {origin['neg_elbo']:.3f}  L2 {origin['l2']:.3f}")

    table = elbd(model, train_set.images[:1000], rng=rng.split("score"))
    order = np.argsort(-table.scores, kind="stable")
    print("ELBD ranking (most important first):", order.tolist())
    mask = build_mask(table.scores, 0.6)
    print("mask:", mask.to_text())

    for K in (1, 2, 5, 15):
        res = optimized_eval(model, test_set.images, mask, K, rng.split("opt"))
        print(f"K={K:<3d}    -ELBO {res['neg_elbo']:.3f}  L2 {res['l2']:.3f}  KL {res['kl']:.3f}")


if __name__ == "__main__":
    main()
