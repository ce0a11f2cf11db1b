use std::io::{BufRead, IsTerminal, Write};

use clap::{value_parser, Arg, ArgMatches, Command};
use serde_json::json;
use skillforge::runtime::{dialogue_step, route_invocation, DialogueInput, DialoguePhase, DialogueState, ModelStore, SkillRuntime};

use crate::{failure, usage, CliResult, Globals};

pub fn command() -> Command {
    Command::new("console")
        .about("Interactive test console: type utterances, see parses and dialogue directives")
        .long_about(
            "Reads one utterance per line and prints the NLU result and the dialogue directive as JSON.\n\
             Commands: :quit, :reload (load the latest version), :reset (drop the dialogue),\n\
             :complete <prefix> (slot value completions). End of input exits.",
        )
        .arg(Arg::new("skill").value_name("SKILL").required(true))
        .arg(Arg::new("version").long("bundle-version").value_name("N").value_parser(value_parser!(u64)).help("Bundle version (default: latest)"))
}

struct Session<'a> {
    g: &'a Globals,
    store: ModelStore,
    rt: SkillRuntime,
    state: DialogueState,
}

impl<'a> Session<'a> {
    fn open(g: &'a Globals, skill: &str, version: Option<u64>) -> CliResult<Self> {
        let store = ModelStore::open(&g.store);
        let rt = load(g, &store, skill, version).map_err(usage)?;
        let state = DialogueState::new(skill);
        Ok(Session { g, store, rt, state })
    }

    fn banner(&self) -> String {
        format!("skillforge console: {} v{} (:quit to exit)", self.rt.skill_id(), self.rt.version())
    }

    fn switch(&mut self, skill: &str) -> Result<(), String> {
        self.rt = load(self.g, &self.store, skill, None)?;
        self.state = DialogueState::new(skill);
        Ok(())
    }

    /// Handles one input line; returns false to stop.
    fn line(&mut self, line: &str, out: &mut impl Write) -> std::io::Result<bool> {
        let line = line.trim();
        if line.is_empty() {
            return Ok(true);
        }
        if let Some(cmd) = line.strip_prefix(':') {
            let (name, arg) = cmd.split_once(char::is_whitespace).unwrap_or((cmd, ""));
            match name {
                "quit" | "q" => return Ok(false),
                "reload" => {
                    let skill = self.rt.skill_id().to_string();
                    match self.switch(&skill) {
                        Ok(()) => writeln!(out, "{}", self.banner())?,
                        Err(e) => writeln!(out, "{}", json!({"error": e}))?,
                    }
                }
                "reset" => self.state = DialogueState::new(self.rt.skill_id()),
                "complete" => writeln!(out, "{}", json!(self.rt.complete(arg.trim())))?,
                other => writeln!(out, "{}", json!({"error": format!("unknown command :{other}")}))?,
            }
            return Ok(true);
        }

        let active = matches!(self.state.phase, DialoguePhase::Eliciting | DialoguePhase::Confirming);
        let mut text = line.to_string();
        if !active {
            // "open <invocation name> ..." hands the turn to another stored skill.
            if let Ok(Some(inv)) = route_invocation(&self.store, line) {
                if inv.skill_id != self.rt.skill_id() {
                    if let Err(e) = self.switch(&inv.skill_id) {
                        writeln!(out, "{}", json!({"error": e}))?;
                        return Ok(true);
                    }
                    writeln!(out, "{}", self.banner())?;
                }
                match inv.request {
                    Some(r) => text = r,
                    None => return Ok(true),
                }
            }
            writeln!(out, "{}", self.rt.understand(&text).to_json())?;
        }
        let state = std::mem::replace(&mut self.state, DialogueState::new(self.rt.skill_id()));
        let (state, directive) = dialogue_step(&self.rt, state, DialogueInput::Answer(text));
        self.state = state;
        writeln!(out, "{}", json!({ "directive": directive }))?;
        Ok(true)
    }
}

fn load(g: &Globals, store: &ModelStore, skill: &str, version: Option<u64>) -> Result<SkillRuntime, String> {
    let bundle = store.load(skill, version).map_err(|e| format!("{skill}: {e}"))?;
    SkillRuntime::new(bundle, g.config.nlu).map_err(|e| format!("{skill}: {e}"))
}

pub fn run(g: &Globals, m: &ArgMatches) -> CliResult {
    let skill = m.get_one::<String>("skill").expect("required");
    let mut session = Session::open(g, skill, m.get_one::<u64>("version").copied())?;
    let stdin = std::io::stdin();
    let interactive = stdin.is_terminal();
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", session.banner()).map_err(failure)?;
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            write!(out, "> ").and_then(|_| out.flush()).map_err(failure)?;
        }
        let Some(line) = lines.next() else { break };
        let line = line.map_err(failure)?;
        if !session.line(&line, &mut out).map_err(failure)? {
            break;
        }
        out.flush().map_err(failure)?;
    }
    Ok(())
}
