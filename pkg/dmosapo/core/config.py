from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    APP_NAME: str = "dmo-sapo"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # Where stage outputs (datasets, checkpoints, metrics) are written
    DMO_OUTPUT_ROOT: str = "runs"
    DMO_CONFIG_DIR: str = "configs"

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore"
    )

settings = Settings()
