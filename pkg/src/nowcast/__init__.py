"""Precipitation nowcasting from radar with weather-station fusion and kriged station maps."""

__version__ = "0.1.0"
