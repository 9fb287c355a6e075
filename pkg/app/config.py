import logging

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    output_dir: str = "output"
    db_path: str = "runs.db"
    log_level: str = "INFO"
    default_seed: int = 0
    default_temperature_c: float = 100.0

    model_config = {"env_file": ".env", "env_file_encoding": "utf-8"}


settings = Settings()

logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
)
