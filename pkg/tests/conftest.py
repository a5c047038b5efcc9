import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from motifrl.denoiser import ModelConfig, build_model
from motifrl.diffusion import MaskPrior, NoiseSchedule, TransitionModel
from motifrl.kernel import Kernel
from motifrl.npe import encode_corpus, learn_vocab, tokenize
from motifrl.oracle import TaskSpec, fit_normalization
from motifrl.synth import assembly_corpus, smiles_corpus

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def smiles_mols():
    return smiles_corpus(200, seed=3, max_atoms=10)


@pytest.fixture(scope="session")
def small_vocab(smiles_mols):
    return learn_vocab(smiles_mols, 64, 8)


@pytest.fixture(scope="session")
def assembly_setup():
    """Tiny assembly corpus, vocab, padded states and fitted kernel pieces."""
    corpus = assembly_corpus(300, seed=5, max_rings=2)
    vocab = learn_vocab(corpus, 30, 4)
    n_max = 6
    keep = [g for g in corpus if tokenize(g, vocab).n_nodes <= n_max]
    states = encode_corpus(keep, vocab, n_max)
    transitions = TransitionModel.fit(states, vocab.d_X, vocab.d_P)
    prior = MaskPrior.fit(states, n_max)
    task = fit_normalization(TaskSpec(0, "rings"), keep)
    return {
        "corpus": keep,
        "vocab": vocab,
        "states": states,
        "transitions": transitions,
        "prior": prior,
        "task": task,
        "n_max": n_max,
    }


def randomize_(model, scale=0.1, seed=0):
    """Replace the zero-initialized parameters with small random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


def toy_model(n_max=2, d_X=3, d_P=3, T=10, tasks=None, seed=0, random=True):
    cfg = ModelConfig(
        n_max=n_max, d_X=d_X, d_P=d_P, T=T, e_x=4, e_e=2, e_p=2, depth=1, heads=2, mlp_ratio=2,
        time_freqs=4, target_hidden=4, value_hidden=4,
    )
    if tasks is None:
        tasks = [TaskSpec(0, "rings", mean=1.0, std=1.0)]
    model = build_model(cfg, tasks, seed=seed)
    return randomize_(model, seed=seed) if random else model


def toy_kernel(d_X=3, d_P=3, T=10, seed=0):
    rng = np.random.default_rng(seed)
    tr = TransitionModel(rng.dirichlet(np.ones(d_X)), rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(d_P)))
    return Kernel(NoiseSchedule(T), tr)


def fd_relative_errors(model, loss_fn, h=1e-5, floor=1e-6):
    """Per-tensor ``max|analytic - central FD| / max(max|FD|, max|analytic|, floor)``."""
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                fd[i] = (up - down) / (2 * h)
            a = analytic[name].view(-1)
            scale = max(fd.abs().max().item(), a.abs().max().item(), floor)
            errors[name] = (a - fd).abs().max().item() / scale
    return errors
