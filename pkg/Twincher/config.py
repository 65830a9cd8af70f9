import copy, os

from Twincher.errors import ConfigError
from Twincher.helpers import open_json, write_json
from Twincher.learners import TrainConfig
from Twincher.solve import GnConfig

COMMANDS = ('gen-entangler', 'complexity', 'trial', 'sweep', 'eta-scan', 'spiral-demo', 'check-gradients')

# Keys are unique across sections so that flat overrides resolve.
_defaults = {
    'OPTIONS': {
        'command': '',
        'master_seed': 0,
        'out_dir': 'twincher_out',
        'jobs': 1,
        'verbosity': 0,
    },
    'ENTANGLER': {
        'n_p': 2,
        'n_s': 4,
        'e_n': 3,
        'w_amp': 1.0,
    },
    'GN': {
        'lambda': 1e-3,
        'delta_max': 0.1,
        'fd_step': 1e-7,
        'max_steps': 5,
        'n_refine': 5,
    },
    'TRAIN': {
        'M': 0.25,
        'sigma_margin': 0.1,
        'bij_weight': 1.0,
        'jac_weight': 1.0,
        'orient_weight': 1.0,
        'rob_weight': 0.1,
        'epochs': 2000,
        'lr': 1e-3,
        'flow_lr': 5e-3,
        'warmup': 0.25,
        'pairs_per_epoch': 256,
        'batch': 128,
        'adversarial_refine_steps': 0,
        'n_layers': 64,
        's_max': 1.0,
        'init_scale': 0.01,
        'n_hidden': 0, # 0 picks about 16 parameters per layer
        'proposal_epochs': 1000,
        'patience': 10,
    },
    'COMPLEXITY': {
        'n_trials': 4000,
        'max_descent_steps': 50,
        'tol': 1e-2,
    },
    'TRIAL': {
        'learner': 'baseline',
        'n_calls': 1024,
        'train_seed': 0,
        'n_test': 1000,
        'success_tol': 1e-2,
    },
    'SWEEP': {
        'w_amps': [0.5, 0.75, 1.0, 1.25, 1.5],
        'n_calls_grid': [512, 1024, 2048, 4096, 8192],
        'seeds': [0, 1, 2],
        'learners': ['baseline', 'twincher'],
    },
    'ETA': {
        'amplitudes': [0.001, 0.002, 0.005, 0.01],
        'n_samples': 200,
        'swap_prob': 0.0,
        'pool': 1,
        'eta_budget': 8192,
        'eta_learner': 'twincher',
    },
    'SPIRAL': {
        'train_budget': 512,
        'grid_resolution': 64,
        'spiral_hidden': 8,
    },
    'GRADCHECK': {
        'n_configs': 20,
    },
}

def _key_index():
    out = {}
    for section, entries in _defaults.items():
        for k in entries:
            out[k] = section
    return out

_sections_of = _key_index()

def _type_ok(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) and all(_type_ok(default[0], v) for v in value)
    return False

class RunConfig():
    '''Resolved run configuration.

    Reads a JSON document of upper-case sections (see `_defaults`), drops
    HELP keys, checks every key and type against the defaults and applies
    `<key>=<value>` overrides, either flat (`lambda`) or qualified
    (`GN.lambda`).

    Args:
        jsonPath (str, optional): Configuration file. Defaults to None (defaults only).
        overrides (dict, optional): Override pairs applied after the file. Defaults to None.

    Raises:
        ConfigError: Unknown section or key, type mismatch, missing or unknown command.

    Attributes:
        config (dict): Resolved configuration by section.
    '''
    def __init__(self, jsonPath=None, overrides=None):
        self.config = copy.deepcopy(_defaults)
        if jsonPath is not None:
            try:
                infile = open_json(jsonPath)
            except (IOError, ValueError) as e:
                raise ConfigError(jsonPath, 'Could not read configuration file %s: %s'%(jsonPath, e))
            if not isinstance(infile, dict):
                raise ConfigError(jsonPath, 'Configuration file %s must hold a JSON object.'%jsonPath)
            for section, entries in infile.items():
                if section == 'HELP':
                    continue
                if section not in self.config:
                    raise ConfigError(section, 'Unknown configuration section "%s". Must be one of %s.'%(section, list(self.config.keys())))
                if not isinstance(entries, dict):
                    raise ConfigError(section, 'Configuration section "%s" must be a dictionary.'%section)
                for k, v in entries.items():
                    if k == 'HELP': continue
                    self.Set(k, v, section)
        if overrides:
            self.Update(overrides)

    def _section(self, key):
        '''Section dictionary with HELP keys removed.'''
        if key not in self.config:
            raise ConfigError(key, 'Unknown configuration section "%s".'%key)
        return {k:v for k,v in self.config[key].items() if k != 'HELP'}

    def Section(self, key):
        return self._section(key)

    def Set(self, key, value, section=None):
        '''Set one key after checking it against the defaults.

        Args:
            key (str): Flat key or `SECTION.key`.
            value: New value.
            section (str, optional): Section the key must belong to.

        Raises:
            ConfigError: Unknown key, key in the wrong section or type mismatch.
        '''
        if section is None and '.' in key:
            section, key = key.split('.', 1)
        if key not in _sections_of:
            raise ConfigError(key, 'Unknown configuration key "%s".'%key)
        home = _sections_of[key]
        if section is not None and section != home:
            raise ConfigError(key, 'Configuration key "%s" belongs to section %s, not %s.'%(key, home, section))
        default = _defaults[home][key]
        if not _type_ok(default, value):
            raise ConfigError(key, 'Configuration key "%s" expects %s, got %r.'%(key, type(default).__name__, value))
        if isinstance(default, float):
            value = float(value)
        elif isinstance(default, list) and isinstance(default[0], float):
            value = [float(v) for v in value]
        self.config[home][key] = value

    def Update(self, overrides):
        for k, v in overrides.items():
            self.Set(k, v)

    def Get(self, key):
        if key not in _sections_of:
            raise ConfigError(key, 'Unknown configuration key "%s".'%key)
        return self.config[_sections_of[key]][key]

    def __getitem__(self, key):
        return self.Get(key)

    @property
    def command(self):
        return self.config['OPTIONS']['command']

    def Validate(self):
        '''Check the command.

        Raises:
            ConfigError: Missing or unknown command.
        '''
        if self.command == '':
            raise ConfigError('command', 'No command given. Must be one of %s.'%(COMMANDS,))
        if self.command not in COMMANDS:
            raise ConfigError('command', 'Unknown command "%s". Must be one of %s.'%(self.command, COMMANDS))
        return self

    def GetGnConfig(self):
        gn = self._section('GN')
        return GnConfig(gn['lambda'], gn['delta_max'], gn['fd_step'], max_steps=gn['max_steps'])

    def GetTrainConfig(self):
        train = self._section('TRAIN')
        if train['n_hidden'] == 0:
            train['n_hidden'] = None
        return TrainConfig(**train)

    def ToDict(self):
        return copy.deepcopy(self.config)

    def SaveOut(self, outDir):
        '''Write the resolved configuration to `outDir`/resolved_config.json.'''
        write_json(self.config, os.path.join(outDir, 'resolved_config.json'))

def parse_config(jsonPath=None, overrides=None, command=None):
    '''Resolve a RunConfig from a file and overrides.

    Raises:
        ConfigError: See RunConfig.
    '''
    cfg = RunConfig(jsonPath, overrides)
    if command is not None:
        cfg.Set('command', command)
    return cfg.Validate()
