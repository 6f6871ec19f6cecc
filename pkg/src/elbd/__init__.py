"""ELBD scoring of VAE latent variables and ELBO optimization with the
selected variables."""
from .mathcore import Rng, sample_standard_normal
from .models import VaeModel, build_model, eval_losses, load_model, save_model, train
from .optimize import marginal_kl, optimized_eval, weak_decode
from .select import PiMask, ScoreTable, baseline_scores, build_mask, elbd, elbd_fc, elbd_mf, gelbd

__version__ = "0.1.0"
