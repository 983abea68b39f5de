"""Sampler configuration."""

from pydantic import BaseModel, ConfigDict, Field

from app.core.config import get_settings


class ChainConfig(BaseModel):
    """Markov chain settings; the seed pins the whole stream."""

    model_config = ConfigDict(frozen=True)

    burn_in: int = Field(default=1000, ge=0)
    thin: int = Field(default=5, ge=1)
    n_samples: int = Field(default=2000, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @classmethod
    def from_settings(cls, seed: int | None = None, **overrides) -> "ChainConfig":
        """Defaults from the ``sampler`` config section."""
        settings = get_settings()
        values = {
            "burn_in": settings.sampler.burn_in,
            "thin": settings.sampler.thin,
            "n_samples": settings.sampler.n_samples,
            "seed": settings.seed if seed is None else seed,
        }
        values.update(overrides)
        return cls(**values)

    @property
    def total_steps(self) -> int:
        return self.burn_in + self.thin * self.n_samples
