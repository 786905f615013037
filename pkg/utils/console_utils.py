from rich.console import Console
from rich.table import Table
from rich.tree import Tree

# Progress and logs go to stderr so stdout stays clean for piping.
console = Console(stderr=True)


def log_info(message: str):
    console.log(message)


def display_config_tree(title: str, values: dict):
    """
    Displays a flat configuration as a tree, one branch per key.

    Args:
        title (str): Root label of the tree.
        values (dict): Key-value pairs to display.
    """
    tree = Tree(title)
    if not values:
        tree.add("[italic grey]No values[/]")
    for key, value in values.items():
        tree.add(f"[bold]{key}[/]: {value}")
    console.print(tree)


def print_table(title: str, columns: list[str], rows: list[list]):
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*[f"{value:.4f}" if isinstance(value, float) else str(value) for value in row])
    console.print(table)
