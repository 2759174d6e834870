"""
Main FastAPI Server
Serves segmentation predictions from a trained model or ensemble
"""
import base64
import io
import logging
from contextlib import asynccontextmanager
from typing import Dict, Optional

import numpy as np
from fastapi import FastAPI, File, HTTPException, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel

from cli import load_predictor
from config import Config
from data_ingest import ClassTable
from ensemble import argmax_mask
from errors import EnsegError
from evaluation import model_name, predict
from experiment_config import load_experiment
from preprocess import PreprocessConfig, resize_pair, to_tensors

# Configure logging
logging.basicConfig(
    level=getattr(logging, Config.LOG_LEVEL),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class Predictor:
    """A loaded model (or ensemble) with the class table and preprocessing it was trained with"""

    def __init__(self, model, class_table: ClassTable, preprocess: PreprocessConfig):
        self.model = model
        self.class_table = class_table
        # serving never augments
        self.preprocess = preprocess.model_copy(update={"augment": None})

    @property
    def name(self) -> str:
        return model_name(self.model)

    def segment(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) uint8 -> (target_h, target_w) class ids"""
        placeholder = np.zeros(image.shape[:2], dtype=np.uint8)
        image, placeholder = resize_pair(image, placeholder, self.preprocess)
        x, _ = to_tensors(image, placeholder, self.preprocess)
        return argmax_mask(predict(self.model, x)).numpy().astype(np.uint8)

    def encode_mask(self, mask: np.ndarray) -> str:
        """Indexed PNG carrying the class table colors as its palette, base64 encoded"""
        png = Image.fromarray(np.ascontiguousarray(mask, dtype=np.uint8))
        palette = [channel for color in self.class_table.colors for channel in color]
        # putpalette turns the L image into P
        png.putpalette(palette + [0] * (768 - len(palette)))
        buffer = io.BytesIO()
        png.save(buffer, format="PNG")
        return base64.b64encode(buffer.getvalue()).decode("ascii")


def build_predictor() -> Predictor:
    """Build the predictor from ENSEG_SERVE_CONFIG / ENSEG_SERVE_CHECKPOINTS"""
    cfg, class_table = load_experiment(Config.SERVE_CONFIG)
    model = load_predictor(cfg, Config.SERVE_CHECKPOINTS)
    return Predictor(model, class_table, cfg.preprocess)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Lifespan event handler for startup and shutdown"""
    # Startup
    if getattr(app.state, "predictor", None) is None:
        app.state.predictor = None
        try:
            Config.validate()
            logger.info("✅ Configuration validated")
            app.state.predictor = build_predictor()
            logger.info(f"✅ Loaded {app.state.predictor.name}")
        except ValueError as e:
            logger.warning(f"⚠️ No model loaded, /predict will answer 503: {e}")
        except EnsegError as e:
            logger.error(f"❌ {e.code}: {e.message}")

    yield

    # Shutdown
    logger.info("🛑 Shutting down...")


class PredictionResponse(BaseModel):
    model: str
    height: int
    width: int
    class_fractions: Dict[str, float]
    mask_png: str


# Initialize FastAPI
app = FastAPI(
    title="Waste Segmentation API",
    description="Per-pixel waste category prediction with U-Net / FPN ensembles",
    version="1.0.0",
    lifespan=lifespan
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=False,  # must stay False with allow_origins=["*"]
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(EnsegError)
async def enseg_error_handler(request: Request, exc: EnsegError):
    status = 400 if exc.exit_code == 2 else 500
    return JSONResponse(status_code=status, content=exc.to_dict())


def _predictor(app: FastAPI) -> Optional[Predictor]:
    return getattr(app.state, "predictor", None)


@app.get("/")
async def root():
    """Health check endpoint"""
    predictor = _predictor(app)
    return {
        "status": "running",
        "service": "Waste Segmentation",
        "version": "1.0.0",
        "model": predictor.name if predictor else None,
    }


@app.get("/health")
async def health():
    """Detailed health check"""
    predictor = _predictor(app)
    return {
        "healthy": predictor is not None,
        "model": predictor.name if predictor else None,
        "classes": predictor.class_table.names if predictor else [],
    }


@app.post("/predict", response_model=PredictionResponse)
async def predict_mask(file: UploadFile = File(...)):
    """
    Segment one uploaded image
    Returns the fraction of pixels per class and the mask as a base64 PNG
    """
    predictor = _predictor(app)
    if predictor is None:
        raise HTTPException(status_code=503, detail="no model loaded")

    payload = await file.read()
    try:
        with Image.open(io.BytesIO(payload)) as img:
            image = np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as e:
        logger.warning(f"⚠️ Rejected upload {file.filename}: {e}")
        raise HTTPException(status_code=400, detail=f"could not decode image: {file.filename}")

    mask = predictor.segment(image)
    counts = np.bincount(mask.ravel(), minlength=predictor.class_table.num_classes)
    fractions = {
        name: float(counts[i]) / mask.size for i, name in enumerate(predictor.class_table.names)
    }
    logger.info(f"📊 {file.filename}: {fractions}")

    return PredictionResponse(
        model=predictor.name,
        height=int(mask.shape[0]),
        width=int(mask.shape[1]),
        class_fractions=fractions,
        mask_png=predictor.encode_mask(mask),
    )


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "main:app",
        host=Config.HOST,
        port=Config.PORT,
        reload=False,
        log_level="info"
    )
