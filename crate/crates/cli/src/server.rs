//! WebSocket transport for teleop sessions: one sim task owns the session,
//! socket handlers talk to it over channels.

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use scoop_core::teleop::{Role, ServerMessage, TeleopSession, RECONNECT_GRACE, STATE_HZ};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};
use tokio::time::{Instant, MissedTickBehavior};

pub type SessionFactory = Box<dyn Fn() -> anyhow::Result<TeleopSession> + Send + Sync>;

#[derive(Debug, Clone, Copy)]
pub struct ServerOptions {
    pub state_hz: f64,
    /// How long a session survives without its controlling client.
    pub reconnect_grace: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            state_hz: STATE_HZ,
            reconnect_grace: Duration::from_secs_f64(RECONNECT_GRACE),
        }
    }
}

#[derive(Debug)]
enum Command {
    Text(String),
    /// A message from an observer; counted as ignored.
    Ignored,
    ControllerLeft,
    ControllerJoined,
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::UnboundedSender<Command>,
    states: broadcast::Sender<String>,
    controller: Arc<Mutex<Option<u64>>>,
    next_id: Arc<AtomicU64>,
}

fn router(commands: mpsc::UnboundedSender<Command>, states: broadcast::Sender<String>) -> Router {
    let st = AppState {
        commands,
        states,
        controller: Arc::new(Mutex::new(None)),
        next_id: Arc::new(AtomicU64::new(1)),
    };
    Router::new().route("/teleop", get(upgrade)).with_state(st)
}

async fn upgrade(ws: WebSocketUpgrade, State(st): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, st))
}

async fn client(socket: WebSocket, st: AppState) {
    let id = st.next_id.fetch_add(1, Ordering::Relaxed);
    let role = {
        let mut c = st.controller.lock().expect("controller lock");
        if c.is_none() {
            *c = Some(id);
            Role::Controller
        } else {
            Role::Observer
        }
    };
    if role == Role::Controller {
        let _ = st.commands.send(Command::ControllerJoined);
    }
    let (mut tx, mut rx) = socket.split();
    let mut states = st.states.subscribe();
    let hello = ServerMessage::Role { role }.to_line();
    if tx.send(Message::Text(hello.into())).await.is_ok() {
        loop {
            tokio::select! {
                incoming = rx.next() => match incoming {
                    Some(Ok(Message::Text(t))) => {
                        let cmd = if role == Role::Controller { Command::Text(t.to_string()) } else { Command::Ignored };
                        if st.commands.send(cmd).is_err() {
                            break;
                        }
                    }
                    Some(Ok(Message::Binary(_))) => {
                        let _ = st.commands.send(Command::Ignored);
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => {}
                },
                state = states.recv() => match state {
                    Ok(line) => {
                        if tx.send(Message::Text(line.into())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => {}
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            }
        }
    }
    if role == Role::Controller {
        *st.controller.lock().expect("controller lock") = None;
        let _ = st.commands.send(Command::ControllerLeft);
    }
}

/// Steps the session in real time, applies client commands and publishes
/// state lines. Returns when every command sender is gone.
async fn sim_loop(
    factory: SessionFactory,
    mut commands: mpsc::UnboundedReceiver<Command>,
    states: broadcast::Sender<String>,
    opts: ServerOptions,
) -> anyhow::Result<()> {
    let mut session = factory()?;
    let dt = session.world().dt();
    let mut tick = tokio::time::interval(Duration::from_secs_f64(dt));
    tick.set_missed_tick_behavior(MissedTickBehavior::Burst);
    let state_every = 1.0 / opts.state_hz;
    let mut next_state = 0.0;
    let mut orphaned_since: Option<Instant> = None;
    loop {
        tick.tick().await;
        loop {
            match commands.try_recv() {
                Ok(Command::Text(t)) => {
                    session.handle_text(&t);
                }
                Ok(Command::Ignored) => session.ignored += 1,
                Ok(Command::ControllerJoined) => orphaned_since = None,
                Ok(Command::ControllerLeft) => {
                    session.disconnect();
                    orphaned_since = Some(Instant::now());
                }
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => return Ok(()),
            }
        }
        if orphaned_since.is_some_and(|t| t.elapsed() > opts.reconnect_grace) {
            log::info!("no controller for {:?}, starting a fresh session", opts.reconnect_grace);
            session = factory()?;
            next_state = 0.0;
            orphaned_since = None;
        }
        if let Err(e) = session.tick() {
            log::error!("teleop step failed: {e}");
            session.disconnect();
        }
        if session.time() + 1e-9 >= next_state {
            next_state += state_every;
            let _ = states.send(ServerMessage::State(session.state_message()).to_line());
        }
    }
}

/// Serves `/teleop` on `listener` until the process is stopped.
pub async fn serve(listener: TcpListener, factory: SessionFactory, opts: ServerOptions) -> anyhow::Result<()> {
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    let (state_tx, _) = broadcast::channel(64);
    let app = router(cmd_tx, state_tx.clone());
    let sim = tokio::spawn(sim_loop(factory, cmd_rx, state_tx, opts));
    let server = axum::serve(listener, app);
    tokio::select! {
        r = server => r?,
        r = sim => r??,
    }
    Ok(())
}
