use super::{BackendError, ChatBackend, ChatCall, ChatReply, Usage};

type ReplyFn = dyn Fn(&ChatCall) -> Result<String, BackendError> + Send + Sync;

/// A backend driven by a closure. Usage is estimated from character counts.
pub struct ScriptedBackend {
    reply: Box<ReplyFn>,
}

impl ScriptedBackend {
    pub fn new(reply: impl Fn(&ChatCall) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self { reply: Box::new(reply) }
    }

    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    pub fn failing(message: impl Into<String>) -> Self {
        let message = message.into();
        Self::new(move |_| Err(BackendError::fatal(message.clone())))
    }
}

impl ChatBackend for ScriptedBackend {
    fn call(&self, call: &ChatCall) -> Result<ChatReply, BackendError> {
        let text = (self.reply)(call)?;
        Ok(ChatReply {
            usage: Usage::estimate(&call.prompt, &text),
            text,
            latency_ms: 0,
            attempts: 1,
        })
    }
}
