from pydantic_settings import BaseSettings
from typing import Optional

class Settings(BaseSettings):
    PROJECT_NAME: str = "Thermal Diffusion"

    # Default output root for every command (overridden by --out)
    THERMALDIFF_OUTPUT_ROOT: str = "runs"

    # Logging
    LOG_LEVEL: str = "INFO"

    # Reproducibility: single-threaded + deterministic kernels by default
    TORCH_NUM_THREADS: int = 1
    DETERMINISTIC: bool = True

    # Evaluation fan-out over read-only weights
    EVAL_WORKERS: int = 1

    # Threads decoding PNGs in load_dataset (output order never depends on it)
    DECODE_WORKERS: int = 4

    # Optional feature file used for Frechet distance instead of the random projection
    FEATURE_FILE: Optional[str] = None

    class Config:
        case_sensitive = True
        env_file = ".env"
        extra = "ignore"

settings = Settings()
