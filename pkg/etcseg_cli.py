from etcseg import create_cli
from etcseg.config import Config

if __name__ == '__main__':
    # Preset selected from the environment
    cli = create_cli(Config.PROFILE)
    cli(prog_name='etcseg')
