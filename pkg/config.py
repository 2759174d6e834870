"""
Configuration for the waste segmentation ensemble
Process settings come from the environment, run defaults from DEFAULTS
"""
import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    """Application configuration"""

    # Logging
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    # Runtime
    ENSEG_CACHE = os.getenv("ENSEG_CACHE")  # pretrained encoder weights cache
    DEVICE = os.getenv("ENSEG_DEVICE", "auto")  # auto | cpu | cuda
    NUM_WORKERS = int(os.getenv("ENSEG_NUM_WORKERS", "0"))
    ENSEMBLE_THREADS = int(os.getenv("ENSEG_ENSEMBLE_THREADS", "1"))

    # Server Configuration
    HOST = os.getenv("HOST", "0.0.0.0")
    PORT = int(os.getenv("PORT", 8000))

    # Serving
    SERVE_CONFIG = os.getenv("ENSEG_SERVE_CONFIG")
    SERVE_CHECKPOINTS = [p for p in os.getenv("ENSEG_SERVE_CHECKPOINTS", "").split(",") if p]

    @classmethod
    def apply_cache(cls):
        """Point torch hub downloads at ENSEG_CACHE when it is set"""
        if cls.ENSEG_CACHE:
            os.makedirs(cls.ENSEG_CACHE, exist_ok=True)
            os.environ["TORCH_HOME"] = cls.ENSEG_CACHE

    @classmethod
    def validate(cls):
        """Validate configuration required by the prediction service"""
        required = [
            "SERVE_CONFIG",
            "SERVE_CHECKPOINTS",
        ]

        missing = [key for key in required if not getattr(cls, key)]

        if missing:
            raise ValueError(f"Missing required environment variables: {', '.join(missing)}")

        return True


# Run defaults. Every pydantic model takes its defaults from here so that
# config.resolved.json always shows the complete picture.
DEFAULTS = {
    # preprocessing
    "target_height": 320,
    "target_width": 480,
    "norm_mean": (0.485, 0.456, 0.406),  # ImageNet
    "norm_std": (0.229, 0.224, 0.225),
    "augment_probability": 0.5,
    "scale_range": (0.8, 1.2),
    "rotate_limit": (-15.0, 15.0),
    "noise_var_range": (10.0, 50.0),
    "perspective_scale": (0.05, 0.1),
    "brightness": 0.2,
    "contrast": 0.2,
    "hue": 0.05,
    # dataset
    "split_ratios": (0.67, 0.13, 0.20),
    "split_seed": 42,
    # model
    "architecture": "unet",
    "encoder": "efficientnet-b0",
    "encoder_pretrained": True,
    # training
    "learning_rate": 1e-4,
    "train_batch_size": 8,
    "valid_batch_size": 1,
    "epochs": 40,
    "seed": 0,
    "shuffle_train": False,
    "divergence_patience": 3,
    # metrics
    "threshold": 0.5,
    "smooth": 1e-7,
    "aggregation": "micro",
    # ensemble
    "fusion_method": "weighted_average",
    # output
    "run_name": "run",
    "output_root": "runs",
}
