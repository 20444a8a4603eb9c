//! Interactive mediated conversation: a person plays the user, and every
//! explicated instruction is printed before the assistant's reply.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::Args;
use lich_core::domain::{ChatMessage, Role, Turn};
use lich_core::mediator::{explicate, Knowledge};
use lich_core::refiner::ExperienceSet;
use lich_core::simulator::Session;

use crate::error::{read_input, CliError, CliResult};
use crate::setup::{mediator_setup, BackendArgs, Backends};

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// Experience store to read (never written).
    #[arg(long)]
    pub experiences: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub mediator_prompt: Option<PathBuf>,
    #[arg(long, default_value = "")]
    pub system_prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: i64,
    #[command(flatten)]
    pub backends: BackendArgs,
}

pub fn chat(args: ChatArgs) -> CliResult<()> {
    let backends = Backends::new(&args.backends)?;
    let params = args.backends.params()?;
    let mut session = Session::new(backends.require("assistant", args.backends.assistant.as_deref())?);
    session.params = params.clone();
    session.system_prompt = args.system_prompt.clone();
    let setup = mediator_setup(
        backends.require("mediator", args.backends.mediator.as_deref())?,
        params,
        args.mediator_prompt.as_deref(),
        false,
    )?;
    let experiences = match &args.experiences {
        Some(p) => ExperienceSet::from_json(&read_input(p)?)?,
        None => {
            eprintln!("warning: no experience store given; the mediator runs cold-start with no experiences");
            ExperienceSet::empty("default")
        }
    };
    let knowledge = Knowledge::Experiences(&experiences);

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    let mut context: Vec<Turn> = Vec::new();
    println!("Type a message; :reset starts over, :quit exits.");
    loop {
        print!("> ");
        stdout.flush().ok();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(|e| CliError::Data(e.to_string()))? == 0 {
            break;
        }
        let line = line.trim_end_matches(['\n', '\r']);
        match line.trim() {
            "" => continue,
            ":quit" | ":q" => break,
            ":reset" => {
                context.clear();
                println!("(conversation cleared)");
                continue;
            }
            _ => {}
        }
        context.push(Turn::new(Role::User, line, None));
        let u = explicate(&context, &knowledge, &setup, args.seed)?;
        println!("Û: {}", u.text);
        let reply = session.ask(session.with_system(vec![ChatMessage::user(u.text)]), args.seed)?;
        println!("assistant: {}", reply.content);
        context.push(Turn::new(Role::Assistant, reply.content, Some(reply.usage)));
    }
    backends.finish()
}
