import typer

from specdraft.cli.commands.bench import bench
from specdraft.cli.commands.train_head import train_head
from specdraft.cli.commands.train_target import train_target
from specdraft.cli.commands.verify_oracles import verify_oracles

app = typer.Typer(add_completion=False, pretty_exceptions_show_locals=False)
app.command()(train_target)
app.command()(train_head)
app.command()(bench)
app.command()(verify_oracles)

if __name__ == "__main__":
    app()
