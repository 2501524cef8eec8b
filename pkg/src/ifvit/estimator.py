"""scikit-learn style estimator over the diffusion model."""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import ModelConfig, build_model
from .data import VOCAB
from .diffusion import make_schedule, new_train_state, sample, train_loop, training_loss
from .numerics import RngState, no_grad
from .validation import check_captions, check_images


class TextToImageDiffusion(BaseEstimator):
    """Text-conditioned pixel diffusion with a U-shaped ViT.

    ``fit(X, y)`` trains on images ``X [N, C, S, S]`` in [-1, 1] and captions
    ``y`` (strings or token ids). ``predict(y)`` samples one image per caption.
    Defaults are the tiny desk configuration.
    """

    def __init__(self, fusion="intermediate", conditioning="crossattn", depth=5, n_image=1, n_text=1,
                 embed_dim=64, heads=4, mlp_ratio=2, patch_size=4, text_len=8, text_in_dim=64,
                 max_steps=2000, batch_size=16, learning_rate=1e-3, warmup=100, weight_decay=0.03,
                 betas=(0.9, 0.9), cfg_drop_prob=0.1, timesteps=1000, sample_steps=50,
                 guidance_scale=3.0, random_state=1234):
        self.fusion = fusion
        self.conditioning = conditioning
        self.depth = depth
        self.n_image = n_image
        self.n_text = n_text
        self.embed_dim = embed_dim
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.patch_size = patch_size
        self.text_len = text_len
        self.text_in_dim = text_in_dim
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup = warmup
        self.weight_decay = weight_decay
        self.betas = betas
        self.cfg_drop_prob = cfg_drop_prob
        self.timesteps = timesteps
        self.sample_steps = sample_steps
        self.guidance_scale = guidance_scale
        self.random_state = random_state

    def model_config(self, channels, size):
        early = self.fusion != "intermediate"
        return ModelConfig(fusion=self.fusion, conditioning=self.conditioning, depth=self.depth,
                           n_image=0 if early else self.n_image, n_text=0 if early else self.n_text,
                           embed_dim=self.embed_dim, heads=self.heads, mlp_ratio=self.mlp_ratio,
                           patch_size=self.patch_size, img_channels=channels, img_size=size,
                           text_len=self.text_len, text_in_dim=self.text_in_dim, vocab_size=len(VOCAB))

    def fit(self, X, y):
        X = check_images(X)
        ids = check_captions(y, self.text_len, n=X.shape[0])
        config = self.model_config(X.shape[1], X.shape[2])
        root = RngState(self.random_state)
        self.model_ = build_model(config, root.spawn(0))
        self.schedule_ = make_schedule(self.timesteps)
        state = new_train_state(self.model_, self.learning_rate, self.warmup, self.weight_decay,
                                self.betas, self.batch_size, self.cfg_drop_prob)
        train_loop(state, (X, ids), self.max_steps, self.schedule_, root.spawn(1))
        self.loss_curve_ = list(state.losses)
        self.n_iter_ = state.step
        return self

    def predict(self, y, guidance_scale=None):
        """One sample per caption; ``guidance_scale`` overrides the fitted default."""
        check_is_fitted(self, "model_")
        ids = check_captions(y, self.text_len)
        omega = self.guidance_scale if guidance_scale is None else guidance_scale
        return sample(self.model_, self.schedule_, ids, omega, self.sample_steps, RngState(self.random_state))

    def score(self, X, y):
        """Negative denoising loss on ``(X, y)`` with fixed noise; higher is better."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.img_channels, self.model_.config.img_size)
        ids = check_captions(y, self.text_len, n=X.shape[0])
        with no_grad():
            loss, _ = training_loss(self.model_, (X, ids), self.schedule_, RngState(self.random_state), 0.0)
        return -float(loss)
