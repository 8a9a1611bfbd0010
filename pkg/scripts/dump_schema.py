"""Print every accepted config key with its default, in config-file syntax."""

from nperf.config import PipelineConfig, dump_text

if __name__ == "__main__":
    print(dump_text(PipelineConfig()), end="")
