from app import create_cli

# Create the command-line entry point
cli = create_cli()

if __name__ == '__main__':
    cli()
