from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from app.api.routes.jobs import router as jobs_router
from app.core.config import settings
from app.core.log_config import setup_logging, setup_torch
import logging

setup_logging()
setup_torch()

logger = logging.getLogger(__name__)
logger.info(f"🚀 Starting {settings.PROJECT_NAME} job service...")
logger.info(f"📁 Output root: {settings.THERMALDIFF_OUTPUT_ROOT}")

app = FastAPI(
    title=f"{settings.PROJECT_NAME} Jobs",
    description="Training and evaluation jobs for conditional diffusion RGB-to-thermal translation",
    version="1.0.0"
)

# Enable CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(jobs_router)

@app.get("/health")
def health_check():
    return {
        "status": "healthy",
        "service": "thermal-diffusion",
        "version": "1.0.0"
    }

@app.get("/")
def read_root():
    return {
        "message": f"Welcome to the {settings.PROJECT_NAME} job service",
        "docs": "/docs",
        "endpoints": {
            "train": "/jobs/train",
            "evaluate": "/jobs/evaluate",
            "status": "/jobs/{job_id}/status",
            "result": "/jobs/{job_id}/result",
            "health": "/health"
        }
    }
