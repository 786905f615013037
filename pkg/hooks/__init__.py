import importlib
from types import ModuleType

HOOK_KINDS = {
    "extra_term_hook": "loss",
    "normal_propagation_hook": "densify",
    "color_sabotage_hook": "densify",
}


def load_hook(name: str) -> ModuleType:
    return importlib.import_module(f"hooks.{name}")


def load_hooks(cfg) -> dict[str, ModuleType]:
    """
    Imports the hook module named by each hook field of a TrainConfig.

    Returns:
        dict: Config field name -> loaded module.
    """
    return {field: load_hook(getattr(cfg, field)) for field in HOOK_KINDS}


def validate_hooks(cfg) -> dict:
    """
    Imports each configured hook and validates its entry in `cfg.hook_config`.

    Returns:
        dict: Hook name -> list of errors; empty when everything is valid.
    """
    errors = {}
    for field, kind in HOOK_KINDS.items():
        name = getattr(cfg, field)
        try:
            module = load_hook(name)
        except ModuleNotFoundError:
            errors[name] = [f"Module '{name}.py' not found."]
            continue
        if getattr(module, "KIND", None) != kind:
            errors[name] = [f"'{name}' is a {getattr(module, 'KIND', 'unknown')} hook, {field} needs a {kind} hook."]
            continue
        try:
            validation_errors = module.validate_config(cfg.hook_config.get(name, {}))
            if validation_errors:  # If not None, it's a list of errors
                errors[name] = validation_errors
        except AttributeError:
            errors[name] = [f"'validate_config' function not found in '{name}.py'."]
        except Exception as e:
            errors[name] = [f"Error validating {name}: {str(e)}"]
    for name in cfg.hook_config:
        if name not in {getattr(cfg, field) for field in HOOK_KINDS}:
            errors[name] = [f"hook_config given for '{name}', which is not a configured hook."]
    return errors
