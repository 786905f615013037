import json
import typing

from InquirerPy import inquirer

from config import TrainConfig, build_config
from hooks import HOOK_KINDS, load_hook
from utils.console_utils import console, display_config_tree

PROMPT_TYPES = (bool, int, float, str)


def field_type(annotation) -> type:
    """Plain type to prompt for; Optional[X] prompts for X."""
    if annotation in PROMPT_TYPES:
        return annotation
    for arg in typing.get_args(annotation):
        if arg in PROMPT_TYPES:
            return arg
    return str


def config_requirements() -> dict:
    """
    Prompt requirements for every scalar TrainConfig key, in the same shape hooks return
    from get_config_requirements().
    """
    requirements = {}
    for name, info in TrainConfig.model_fields.items():
        if name == "hook_config":
            continue
        requirements[name] = {
            "description": f"{info.description} [default {info.get_default(call_default_factory=True)!r}]",
            "mandatory": name == "scene",
            "type": field_type(info.annotation),
        }
    return requirements


def prompt_required_config(requirements: dict) -> dict:
    """
    Collects values for the given requirements. Blank answers to optional fields keep the default.

    Args:
        requirements (dict): Mapping of field names to dicts with description, type and mandatory flag.

    Returns:
        dict: Typed answers for the fields the user filled in.
    """
    answers = {}

    for field, info in requirements.items():
        desc = info.get("description", "")
        mandatory = info.get("mandatory", False)
        kind = info.get("type", str)

        message = f"{field} {'(mandatory)' if mandatory else '(optional)'}: {desc}"

        if kind == bool:
            answers[field] = inquirer.confirm(message=message).execute()
            continue

        while True:
            answer = inquirer.text(
                message=message,
                validate=lambda val: val != "" if mandatory else True,
            ).execute()
            if answer == "":
                break
            try:
                if kind == int:
                    answer = int(answer)
                elif kind == float:
                    answer = float(answer)
                elif kind == list:
                    answer = [item.strip() for item in answer.split(",") if item.strip()]
            except ValueError:
                console.print(f"[red]Invalid input. Expected {kind.__name__} for '{field}'[/]")
                continue
            answers[field] = answer
            break

    return answers


def run_wizard(out_path: str = "config.json") -> dict:
    """
    Interactive config creation: pick the keys to change, answer their prompts, configure
    the selected hooks, then review the result as a tree and save it.

    Returns:
        dict: The saved configuration (only keys that differ from the defaults).

    Raises:
        ConfigError: If the answers do not validate.
    """
    requirements = config_requirements()
    raw = prompt_required_config({"scene": requirements.pop("scene")})

    selected = inquirer.checkbox(
        message="Select keys to change (space to toggle, enter to continue):",
        choices=list(requirements),
    ).execute()
    raw.update(prompt_required_config({key: requirements[key] for key in selected}))

    hook_config = {}
    for hook_field in HOOK_KINDS:
        name = raw.get(hook_field, TrainConfig.model_fields[hook_field].default)
        hook_requirements = load_hook(name).get_config_requirements()
        if hook_requirements:
            console.print(f"\nConfigure hook: {name}")
            values = prompt_required_config(hook_requirements)
            if values:
                hook_config[name] = values
    if hook_config:
        raw["hook_config"] = hook_config

    cfg = build_config(raw)
    display_config_tree("Training config", cfg.model_dump())
    if inquirer.confirm(message=f"Save to {out_path}?", default=True).execute():
        with open(out_path, "w") as f:
            json.dump(raw, f, indent=2)
        console.print(f"\nConfig saved to {out_path}")
    return raw
