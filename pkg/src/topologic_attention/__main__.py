from topologic_attention.cli import cli

if __name__ == "__main__":
    cli()
